//! Parity trees and the comparison tree that steers a binary search.

use qkd_cascade::bitframe::BitVector;
use qkd_cascade::paritytree::{ComparisonTree, Descent, ParityTree};

fn main() -> qkd_cascade::Result<()> {
    let reference = BitVector::from_bit_str("1011001110001101")?;
    let mut noisy = reference.clone();
    noisy.flip(11);

    let k = 8;
    let a = ParityTree::build(&reference, 0, k, 2)?;
    let mut b = ParityTree::build(&noisy, 0, k, 2)?;
    println!("storage: {} bits for {} bits of key", b.storage_bits(), reference.len());

    // Compare block parities, then halve the odd block using the peer's answers.
    let mut cmp = ComparisonTree::new(k, 2)?;
    for block in 0..2 {
        cmp.set_root(block, a.block_parity(block) != b.block_parity(block));
    }
    let block = (0..2).find(|&i| cmp.root(i)).expect("one block is odd");
    let mut asked = 0;
    let leaf = loop {
        match cmp.descend(block) {
            Descent::Leaf(pos) => break pos,
            Descent::Query(node) => {
                let left = 2 * node;
                cmp.resolve(block, node, a.node(block, left) != b.node(block, left));
                asked += 1;
            }
        }
    };
    let pos = block * k + leaf;
    println!("error in block {block} at bit {pos} after {asked} questions");

    noisy.flip(pos);
    b.flip_leaf_path(block, leaf)?;
    println!("fixed: {}, tree consistent: {}", noisy == reference, b.is_consistent());
    Ok(())
}
