use std::collections::VecDeque;

use crate::crypto::{Digest, SigningKeyPair};

use super::{Block, Transaction};

/// Trusted total-order broadcast with final decisions.
pub trait OrderingService {
    fn submit(&mut self, tx: Transaction);
    /// Emits the next block, or `None` when there is nothing to emit.
    fn cut_block(&mut self) -> Option<Block>;
}

/// Single trusted ordering node.
#[derive(Debug)]
pub struct SoloOrderer {
    key: SigningKeyPair,
    block_size: usize,
    emit_empty: bool,
    pending: VecDeque<Transaction>,
    last_seq: u64,
    last_hash: Digest,
    emitted: Vec<Block>,
}

impl SoloOrderer {
    pub fn new(key: SigningKeyPair, genesis: &Block, block_size: usize) -> Self {
        assert!(block_size > 0, "block size must be positive");
        Self {
            key,
            block_size,
            emit_empty: false,
            pending: VecDeque::new(),
            last_seq: genesis.seq,
            last_hash: genesis.hash(),
            emitted: Vec::new(),
        }
    }

    pub fn with_empty_blocks(mut self, emit_empty: bool) -> Self {
        self.emit_empty = emit_empty;
        self
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn set_block_size(&mut self, block_size: usize) {
        assert!(block_size > 0, "block size must be positive");
        self.block_size = block_size;
    }

    /// Every block emitted so far, in order. Never shrinks.
    pub fn history(&self) -> &[Block] {
        &self.emitted
    }

    /// Cuts blocks until nothing is pending.
    pub fn drain(&mut self) -> Vec<Block> {
        let mut out = Vec::new();
        while !self.pending.is_empty() {
            out.extend(self.cut_block());
        }
        out
    }
}

impl OrderingService for SoloOrderer {
    fn submit(&mut self, tx: Transaction) {
        self.pending.push_back(tx);
    }

    fn cut_block(&mut self) -> Option<Block> {
        if self.pending.is_empty() && !self.emit_empty {
            return None;
        }
        let n = self.block_size.min(self.pending.len());
        let transactions: Vec<_> = self.pending.drain(..n).collect();
        let mut block = Block {
            seq: self.last_seq + 1,
            prev_hash: self.last_hash,
            transactions,
            config: None,
            orderer_signature: None,
        };
        block.orderer_signature = Some(self.key.sign(&block.signing_message()));
        self.last_seq = block.seq;
        self.last_hash = block.hash();
        self.emitted.push(block.clone());
        Some(block)
    }
}
