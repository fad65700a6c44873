//! Untrusted blockchain substrate: versioned key-value state, the signed
//! transaction and block structures, a solo ordering service and the peer's
//! validate-and-commit pipeline.

mod orderer;
mod store;
mod types;
mod validation;

pub use orderer::{OrderingService, SoloOrderer};
pub use store::{StoredValue, VersionView, VersionedStore};
pub use types::*;
pub use validation::{
    check_block_header, commit_block, validate_transactions, CommitRecord, EndorsementPolicy, Ledger,
    PeerEndorsementPolicy, TxValidity,
};

pub use crate::codec::{decode as canonical_decode, encode as canonical_encode};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("genesis configuration is missing `{0}`")]
    MissingField(&'static str),
    #[error("orderer signature does not verify")]
    BadOrdererSignature,
    #[error("sequence gap: expected block {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("previous-hash chain broken at block {0}")]
    HashChainBreak(u64),
    #[error("malformed genesis block")]
    MalformedGenesis,
}
