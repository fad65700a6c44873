//! Enclave-protected chaincode execution on an execute-order-validate ledger,
//! simulated deterministically and checked against a reset-aware security
//! oracle.

pub mod adversary;
pub mod auction;
pub mod bench;
pub mod chaincode_enclave;
pub mod codec;
pub mod crypto;
pub mod ledger;
pub mod ledger_enclave;
pub mod node;
pub mod par;
pub mod registry;
pub mod scenario;
pub mod tee;

use serde::{Deserialize, Serialize};

/// Test-only switches that disable one security check each, so the
/// security oracle can be shown to catch the resulting leaks. All `false`
/// in every production configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Weakenings {
    /// Chaincode enclave trusts host-supplied state without checking the
    /// ledger enclave's signed metadata.
    pub skip_meta_signature: bool,
    /// Ledger enclave accepts blocks out of sequence and off-chain.
    pub skip_sequence_check: bool,
    /// Registry, validator and clients accept any attestation evidence.
    pub skip_attestation_check: bool,
}

impl Weakenings {
    pub const NONE: Weakenings =
        Weakenings { skip_meta_signature: false, skip_sequence_check: false, skip_attestation_check: false };
}
