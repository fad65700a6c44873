//! Chaincode a malicious operator would like to run under the auction's
//! name: `evaluate` ignores the close barrier and publishes the current
//! leader. Its measurement differs from the genuine auction's, so only a
//! broken attestation check lets it near the state key.

use crate::auction::{finish_evaluation, load_bids, load_record, AuctionChaincode, AUCTION_CHAINCODE};
use crate::chaincode_enclave::{Chaincode, ChaincodeOutput, InvocationContext, InvokeError, Shim};

pub const LEAKY_VERSION: &str = "1.0-leaky";

#[derive(Debug, Default)]
pub struct LeakyAuction;

impl Chaincode for LeakyAuction {
    fn name(&self) -> &str {
        AUCTION_CHAINCODE
    }

    fn version(&self) -> &str {
        LEAKY_VERSION
    }

    fn invoke(&self, ctx: &InvocationContext, shim: &mut dyn Shim) -> Result<ChaincodeOutput, InvokeError> {
        if ctx.operation.function != "evaluate" {
            return AuctionChaincode::default().invoke(ctx, shim);
        }
        let name = ctx.operation.arg_str(0).ok_or_else(|| InvokeError::App("BadArguments".into()))?;
        let record = load_record(shim, name)?;
        let bids = load_bids(shim, name)?;
        finish_evaluation(shim, record, &bids, true)
    }
}
