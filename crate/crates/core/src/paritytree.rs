//! Flat complete-binary-tree bit stores.
//!
//! Each block of length `k` owns `2k` consecutive bits. Node 1 is the
//! root, node `i` has children `2i` and `2i + 1`, and nodes `k..2k` are
//! the leaves. Node 0 is not part of the tree and carries per-block
//! flags: in a [`ParityTree`] the root comparison result, in a
//! [`ComparisonTree`] the backtracking lock. Blocks of one pass are stored
//! back to back, so node `i` of block `b` lives at bit `b * 2k + i`.
//!
//! A [`ComparisonTree`] records `local XOR remote` parity for every node
//! whose remote parity is known. Whether the children of internal node `i`
//! are known is encoded by XOR consistency: they are known iff
//! `c[2i] ^ c[2i+1] == c[i]`. A freshly initialised tree (internal nodes
//! 1, leaves 0) therefore has nothing resolved, and flipping a leaf-to-root
//! path keeps every node's resolved state intact.

use crate::bitframe::BitVector;
use crate::error::{param, Result};

const WORD: usize = 64;

#[inline]
fn get(words: &[u64], i: usize) -> bool {
    (words[i / WORD] >> (i % WORD)) & 1 == 1
}

#[inline]
fn put(words: &mut [u64], i: usize, v: bool) {
    let m = 1u64 << (i % WORD);
    if v {
        words[i / WORD] |= m;
    } else {
        words[i / WORD] &= !m;
    }
}

#[inline]
fn toggle(words: &mut [u64], i: usize) {
    words[i / WORD] ^= 1u64 << (i % WORD);
}

/// XOR adjacent bit pairs of `w` and pack the 32 results into the low half.
#[inline]
fn pair_parities(w: u64) -> u64 {
    let mut x = (w ^ (w >> 1)) & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x >> 4)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x >> 8)) & 0x0000_FFFF_0000_FFFF;
    (x | (x >> 16)) & 0x0000_0000_FFFF_FFFF
}

fn check_block_len(k: usize) -> Result<()> {
    if !k.is_power_of_two() {
        return Err(param(format!("block length {k} is not a power of two")));
    }
    Ok(())
}

/// Parities of every dyadic sub-block, for all blocks of one pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParityTree {
    words: Vec<u64>,
    block_len: usize,
    blocks: usize,
    base_offset: usize,
}

impl ParityTree {
    /// Single-block tree over `bits[base..base + k]`.
    pub fn for_block(bits: &BitVector, base: usize, k: usize) -> Result<Self> {
        Self::build(bits, base, k, 1)
    }

    /// Trees for `blocks` consecutive blocks of length `k` starting at `base`.
    pub fn build(bits: &BitVector, base: usize, k: usize, blocks: usize) -> Result<Self> {
        check_block_len(k)?;
        if blocks == 0 {
            return Err(param("at least one block required"));
        }
        let span = k
            .checked_mul(blocks)
            .and_then(|s| s.checked_add(base))
            .filter(|&end| end <= bits.len())
            .ok_or_else(|| {
                param(format!(
                    "{blocks} blocks of {k} bits from {base} exceed length {}",
                    bits.len()
                ))
            })?;
        debug_assert!(span <= bits.len());

        let total = 2 * k * blocks;
        let mut words = vec![0u64; total.div_ceil(WORD)];
        let src = bits.as_words();

        if k >= WORD && base % WORD == 0 {
            let kw = k / WORD;
            for b in 0..blocks {
                let from = (base + b * k) / WORD;
                let to = (b * 2 * k + k) / WORD;
                words[to..to + kw].copy_from_slice(&src[from..from + kw]);
            }
        } else {
            for b in 0..blocks {
                for l in 0..k {
                    if get(src, base + b * k + l) {
                        put(&mut words, b * 2 * k + k + l, true);
                    }
                }
            }
        }

        for b in 0..blocks {
            let off = b * 2 * k;
            let mut level = k / 2;
            while level >= 1 {
                // nodes [level, 2*level) from children [2*level, 4*level)
                if level >= WORD && off % WORD == 0 {
                    let child_w = (off + 2 * level) / WORD;
                    let parent_w = (off + level) / WORD;
                    for j in 0..level / WORD {
                        let lo = pair_parities(words[child_w + 2 * j]);
                        let hi = pair_parities(words[child_w + 2 * j + 1]);
                        words[parent_w + j] = lo | (hi << 32);
                    }
                } else {
                    for i in level..2 * level {
                        let v = get(&words, off + 2 * i) ^ get(&words, off + 2 * i + 1);
                        put(&mut words, off + i, v);
                    }
                }
                level /= 2;
            }
        }

        Ok(ParityTree {
            words,
            block_len: k,
            blocks,
            base_offset: base,
        })
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn base_offset(&self) -> usize {
        self.base_offset
    }

    pub fn storage_bits(&self) -> usize {
        2 * self.block_len * self.blocks
    }

    #[inline]
    fn offset(&self, block: usize, node: usize) -> usize {
        assert!(block < self.blocks && node < 2 * self.block_len);
        block * 2 * self.block_len + node
    }

    /// Stored bit at `node` of `block` (node 0 is the comparison flag).
    #[inline]
    pub fn node(&self, block: usize, node: usize) -> bool {
        get(&self.words, self.offset(block, node))
    }

    #[inline]
    pub fn block_parity(&self, block: usize) -> bool {
        self.node(block, 1)
    }

    pub fn leaf(&self, block: usize, pos: usize) -> bool {
        self.node(block, self.block_len + pos)
    }

    /// Flips leaf `leaf_pos` and every ancestor up to the root. Node 0 is untouched.
    pub fn flip_leaf_path(&mut self, block: usize, leaf_pos: usize) -> Result<()> {
        if block >= self.blocks || leaf_pos >= self.block_len {
            return Err(param(format!(
                "leaf {leaf_pos} of block {block} out of range ({} x {})",
                self.blocks, self.block_len
            )));
        }
        let off = block * 2 * self.block_len;
        let mut i = self.block_len + leaf_pos;
        while i >= 1 {
            toggle(&mut self.words, off + i);
            i /= 2;
        }
        Ok(())
    }

    pub fn set_root_comparison(&mut self, block: usize, mismatch: bool) {
        let o = self.offset(block, 0);
        put(&mut self.words, o, mismatch);
    }

    pub fn get_root_comparison(&self, block: usize) -> bool {
        self.node(block, 0)
    }

    pub fn toggle_root_comparison(&mut self, block: usize) -> bool {
        let o = self.offset(block, 0);
        toggle(&mut self.words, o);
        get(&self.words, o)
    }

    /// Whether every internal node equals the XOR of its children.
    pub fn is_consistent(&self) -> bool {
        (0..self.blocks).all(|b| {
            (1..self.block_len)
                .all(|i| self.node(b, i) == self.node(b, 2 * i) ^ self.node(b, 2 * i + 1))
        })
    }
}

/// Where a binary search stands inside one block of a [`ComparisonTree`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Descent {
    /// The odd-mismatch path ends at this leaf position.
    Leaf(usize),
    /// The remote parity of the left child of this node is needed.
    Query(usize),
}

/// Local-vs-remote comparison results plus the backtracking lock.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComparisonTree {
    words: Vec<u64>,
    block_len: usize,
    blocks: usize,
}

impl ComparisonTree {
    /// Internal nodes `1..k` set, leaves and node 0 clear.
    pub fn new(k: usize, blocks: usize) -> Result<Self> {
        check_block_len(k)?;
        if blocks == 0 {
            return Err(param("at least one block required"));
        }
        let mut words = vec![0u64; (2 * k * blocks).div_ceil(WORD)];
        for b in 0..blocks {
            for i in 1..k {
                put(&mut words, b * 2 * k + i, true);
            }
        }
        Ok(ComparisonTree {
            words,
            block_len: k,
            blocks,
        })
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn storage_bits(&self) -> usize {
        2 * self.block_len * self.blocks
    }

    #[inline]
    fn offset(&self, block: usize, node: usize) -> usize {
        assert!(block < self.blocks && node < 2 * self.block_len);
        block * 2 * self.block_len + node
    }

    #[inline]
    pub fn node(&self, block: usize, node: usize) -> bool {
        get(&self.words, self.offset(block, node))
    }

    /// Sets the lock and returns its previous value.
    pub fn lock(&mut self, block: usize) -> bool {
        let o = self.offset(block, 0);
        let prev = get(&self.words, o);
        put(&mut self.words, o, true);
        prev
    }

    pub fn unlock(&mut self, block: usize) {
        let o = self.offset(block, 0);
        put(&mut self.words, o, false);
    }

    pub fn is_locked(&self, block: usize) -> bool {
        self.node(block, 0)
    }

    /// Current comparison result of the whole block.
    pub fn root(&self, block: usize) -> bool {
        self.node(block, 1)
    }

    /// True when the comparison results of both children of internal node `i` are known.
    pub fn is_resolved(&self, block: usize, i: usize) -> bool {
        debug_assert!(i >= 1 && i < self.block_len);
        self.node(block, i) == self.node(block, 2 * i) ^ self.node(block, 2 * i + 1)
    }

    /// Writes `v` at a node whose children are unresolved, keeping them unresolved.
    fn set_unresolved(&mut self, block: usize, i: usize, v: bool) {
        let off = block * 2 * self.block_len;
        let mut i = i;
        let mut v = v;
        loop {
            put(&mut self.words, off + i, v);
            if i >= self.block_len {
                return;
            }
            let l = get(&self.words, off + 2 * i);
            let r = get(&self.words, off + 2 * i + 1);
            if l ^ r != v {
                return;
            }
            i = 2 * i + 1;
            v = !r;
        }
    }

    /// Records the comparison of the whole block on a fresh (unresolved) tree.
    pub fn set_root(&mut self, block: usize, mismatch: bool) {
        assert!(self.block_len == 1 || !self.is_resolved(block, 1));
        self.set_unresolved(block, 1, mismatch);
    }

    /// Records the comparison of the left child of `i`; the right child follows by XOR.
    pub fn resolve(&mut self, block: usize, i: usize, left_mismatch: bool) {
        assert!(i >= 1 && i < self.block_len && !self.is_resolved(block, i));
        let m = self.node(block, i);
        self.set_unresolved(block, 2 * i, left_mismatch);
        self.set_unresolved(block, 2 * i + 1, m ^ left_mismatch);
        debug_assert!(self.is_resolved(block, i));
    }

    /// Follows known mismatches from the root. The root must be a mismatch.
    pub fn descend(&self, block: usize) -> Descent {
        debug_assert!(self.root(block));
        let k = self.block_len;
        let mut i = 1;
        while i < k {
            if !self.is_resolved(block, i) {
                return Descent::Query(i);
            }
            i = if self.node(block, 2 * i) { 2 * i } else { 2 * i + 1 };
        }
        Descent::Leaf(i - k)
    }

    /// Mirrors a leaf correction; node 0 is untouched.
    pub fn flip_leaf_path(&mut self, block: usize, leaf_pos: usize) -> Result<()> {
        if block >= self.blocks || leaf_pos >= self.block_len {
            return Err(param(format!(
                "leaf {leaf_pos} of block {block} out of range ({} x {})",
                self.blocks, self.block_len
            )));
        }
        let off = block * 2 * self.block_len;
        let mut i = self.block_len + leaf_pos;
        while i >= 1 {
            toggle(&mut self.words, off + i);
            i /= 2;
        }
        Ok(())
    }

    /// Raw store, node order, for inspection.
    pub fn bits(&self, block: usize) -> Vec<bool> {
        (0..2 * self.block_len).map(|i| self.node(block, i)).collect()
    }
}
