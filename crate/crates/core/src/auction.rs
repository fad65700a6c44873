//! Sealed-bid auction chaincode.
//!
//! Layout inside the `auction` namespace:
//!
//! * `<name>` holds the [`AuctionRecord`];
//! * `<name>.` is an empty placeholder written at creation;
//! * `<name>.<client>` holds that client's [`BidRecord`];
//! * `<name>~result` holds the [`AuctionOutcome`] once evaluated.
//!
//! Closing the auction is the barrier: `evaluate` runs only against a
//! committed `closed` record, and any bid ordered after the close conflicts
//! on the record it read. Operation encodings are described in
//! `docs/auction.md`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode_enclave::{Chaincode, ChaincodeOutput, InvocationContext, InvokeError, Operation, Shim};
use crate::codec;

pub const AUCTION_CHAINCODE: &str = "auction";
pub const AUCTION_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum AuctionError {
    #[error("an auction with this name already exists")]
    AlreadyExists,
    #[error("no such auction")]
    NoSuchAuction,
    #[error("auction is closed")]
    Closed,
    #[error("only the auctioneer may close the auction")]
    NotAuctioneer,
    #[error("auction is not active")]
    NotActive,
    #[error("auction has not been closed")]
    BarrierAbsent,
    #[error("auction was already evaluated")]
    AlreadyEvaluated,
    #[error("bad arguments")]
    BadArguments,
}

impl AuctionError {
    /// Stable code carried in endorsement results.
    pub fn code(self) -> String {
        format!("{self:?}")
    }
}

impl From<AuctionError> for InvokeError {
    fn from(e: AuctionError) -> Self {
        InvokeError::App(e.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuctionStatus {
    Active,
    Closed,
    Evaluated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionRecord {
    pub name: String,
    pub description: String,
    pub status: AuctionStatus,
    pub auctioneer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BidRecord {
    pub client: String,
    pub amount: u64,
}

/// Winner and winning amount, or `None` when nobody bid.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub auction: String,
    pub winner: Option<(String, u64)>,
}

pub fn bid_key(auction: &str, client: &str) -> String {
    format!("{auction}.{client}")
}

pub fn result_key(auction: &str) -> String {
    format!("{auction}~result")
}

/// Highest amount wins; ties go to the lexicographically smallest client.
pub fn first_price_winner<'a>(bids: impl IntoIterator<Item = (&'a str, u64)>) -> Option<(String, u64)> {
    bids.into_iter()
        .fold(None::<(&str, u64)>, |best, (c, a)| match best {
            Some((bc, ba)) if ba > a || (ba == a && bc <= c) => Some((bc, ba)),
            _ => Some((c, a)),
        })
        .map(|(c, a)| (c.to_owned(), a))
}

// Operation constructors used by clients.

pub fn op_create(name: &str, description: &str) -> Operation {
    Operation::new("create", vec![name.as_bytes().to_vec(), description.as_bytes().to_vec()])
}

pub fn op_bid(name: &str, amount: u64) -> Operation {
    Operation::new("bid", vec![name.as_bytes().to_vec(), codec::encode(&amount)])
}

pub fn op_close(name: &str) -> Operation {
    Operation::new("close", vec![name.as_bytes().to_vec()])
}

pub fn op_evaluate(name: &str) -> Operation {
    Operation::new("evaluate", vec![name.as_bytes().to_vec()])
}

pub fn op_noop() -> Operation {
    Operation::new("noop", vec![])
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.contains(['.', '~', '/'])
}

fn auction_name(op: &Operation) -> Result<&str, AuctionError> {
    op.arg_str(0).filter(|n| valid_name(n)).ok_or(AuctionError::BadArguments)
}

pub(crate) fn load_record(shim: &mut dyn Shim, name: &str) -> Result<AuctionRecord, InvokeError> {
    let bytes = shim.get_state(name)?.ok_or(AuctionError::NoSuchAuction)?;
    codec::decode(&bytes).map_err(|_| InvokeError::App(AuctionError::BadArguments.code()))
}

/// Bids stored under an auction, in client order.
pub(crate) fn load_bids(shim: &mut dyn Shim, name: &str) -> Result<Vec<BidRecord>, InvokeError> {
    let prefix = format!("{name}.");
    let mut bids = Vec::new();
    for (key, value) in shim.get_range(&prefix)? {
        if key == prefix {
            continue;
        }
        let bid: BidRecord = codec::decode(&value).map_err(|_| InvokeError::App(AuctionError::BadArguments.code()))?;
        bids.push(bid);
    }
    Ok(bids)
}

pub(crate) fn finish_evaluation(
    shim: &mut dyn Shim,
    mut record: AuctionRecord,
    bids: &[BidRecord],
    public: bool,
) -> Result<ChaincodeOutput, InvokeError> {
    let outcome = AuctionOutcome {
        auction: record.name.clone(),
        winner: first_price_winner(bids.iter().map(|b| (b.client.as_str(), b.amount))),
    };
    record.status = AuctionStatus::Evaluated;
    shim.put_state(&record.name, codec::encode(&record))?;
    shim.put_state(&result_key(&record.name), codec::encode(&outcome))?;
    Ok(ChaincodeOutput { payload: codec::encode(&outcome), public })
}

#[derive(Debug, Clone)]
pub struct AuctionChaincode {
    /// Announce evaluation outcomes in the clear.
    pub public_outcome: bool,
}

impl Default for AuctionChaincode {
    fn default() -> Self {
        Self { public_outcome: true }
    }
}

impl AuctionChaincode {
    fn create(&self, ctx: &InvocationContext, shim: &mut dyn Shim) -> Result<ChaincodeOutput, InvokeError> {
        let name = auction_name(&ctx.operation)?;
        let description = ctx.operation.arg_str(1).ok_or(AuctionError::BadArguments)?;
        if shim.get_state(name)?.is_some() {
            return Err(AuctionError::AlreadyExists.into());
        }
        let record = AuctionRecord {
            name: name.to_owned(),
            description: description.to_owned(),
            status: AuctionStatus::Active,
            auctioneer: ctx.client_id.clone(),
        };
        shim.put_state(name, codec::encode(&record))?;
        shim.put_state(&format!("{name}."), Vec::new())?;
        Ok(ChaincodeOutput { payload: name.as_bytes().to_vec(), public: false })
    }

    fn bid(&self, ctx: &InvocationContext, shim: &mut dyn Shim) -> Result<ChaincodeOutput, InvokeError> {
        let name = auction_name(&ctx.operation)?;
        let amount = ctx.operation.arg_u64(1).ok_or(AuctionError::BadArguments)?;
        if !valid_name(&ctx.client_id) {
            return Err(AuctionError::BadArguments.into());
        }
        let record = load_record(shim, name)?;
        if record.status != AuctionStatus::Active {
            return Err(AuctionError::Closed.into());
        }
        let bid = BidRecord { client: ctx.client_id.clone(), amount };
        shim.put_state(&bid_key(name, &ctx.client_id), codec::encode(&bid))?;
        Ok(ChaincodeOutput { payload: Vec::new(), public: false })
    }

    fn close(&self, ctx: &InvocationContext, shim: &mut dyn Shim) -> Result<ChaincodeOutput, InvokeError> {
        let name = auction_name(&ctx.operation)?;
        let mut record = load_record(shim, name)?;
        if record.auctioneer != ctx.client_id {
            return Err(AuctionError::NotAuctioneer.into());
        }
        if record.status != AuctionStatus::Active {
            return Err(AuctionError::NotActive.into());
        }
        record.status = AuctionStatus::Closed;
        shim.put_state(name, codec::encode(&record))?;
        Ok(ChaincodeOutput { payload: Vec::new(), public: false })
    }

    fn evaluate(&self, ctx: &InvocationContext, shim: &mut dyn Shim) -> Result<ChaincodeOutput, InvokeError> {
        let name = auction_name(&ctx.operation)?;
        let record = load_record(shim, name)?;
        match record.status {
            AuctionStatus::Active => return Err(AuctionError::BarrierAbsent.into()),
            AuctionStatus::Evaluated => return Err(AuctionError::AlreadyEvaluated.into()),
            AuctionStatus::Closed => {}
        }
        let bids = load_bids(shim, name)?;
        finish_evaluation(shim, record, &bids, self.public_outcome)
    }
}

impl Chaincode for AuctionChaincode {
    fn name(&self) -> &str {
        AUCTION_CHAINCODE
    }

    fn version(&self) -> &str {
        AUCTION_VERSION
    }

    fn invoke(&self, ctx: &InvocationContext, shim: &mut dyn Shim) -> Result<ChaincodeOutput, InvokeError> {
        match ctx.operation.function.as_str() {
            "create" => self.create(ctx, shim),
            "bid" => self.bid(ctx, shim),
            "close" => self.close(ctx, shim),
            "evaluate" => self.evaluate(ctx, shim),
            "noop" => Ok(ChaincodeOutput { payload: Vec::new(), public: false }),
            _ => Err(AuctionError::BadArguments.into()),
        }
    }
}
