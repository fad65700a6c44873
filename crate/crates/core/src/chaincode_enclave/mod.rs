//! Per-application enclave hosting one chaincode.
//!
//! The enclave decrypts client operations, runs the chaincode against state
//! it verifies through the bound ledger enclave, encrypts what it writes and
//! what it returns, and signs the resulting endorsement with its own key.
//! After bootstrap its state never changes, so it is sealed once and
//! restored verbatim after a restart.

mod shim;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::crypto::{
    self, hybrid_decrypt, hybrid_encrypt, BoxKeyPair, BoxPublicKey, Digest, Envelope, PublicKey, SealedBlob, Signature,
    SigningKeyPair, SymmetricKey,
};
use crate::ledger::{
    Block, ChainConfig, EncryptionMode, Endorsement, EndorsementBody, EndorserId, ProposalPayload, ReadSet,
    TransactionProposal, VersionedStore, WriteSet,
};
use crate::ledger_enclave::binding_report_data;
use crate::tee::{AttestationReport, CodeIdentity, EnclaveEnv, EnclaveInstance, EnclaveProgram, Host, TeeError};
use crate::Weakenings;

pub use shim::{verify_meta, HonestAccess, NativeShim, OcallHost, Shim, ShimError, StateAccess, StoredCiphertext};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum CceError {
    #[error("enclave is not set up")]
    NotSetUp,
    #[error("enclave is already set up")]
    AlreadySetup,
    #[error("chaincode is not configured as an enclave chaincode in genesis")]
    UnknownChaincode,
    #[error("platform is not certified for remote attestation")]
    UncertifiedPlatform,
    #[error("enclave is not bound to a ledger enclave")]
    NotBound,
    #[error("ledger enclave binding rejected")]
    BindRejected,
    #[error("operation not available in this encryption mode")]
    WrongMode,
    #[error("decryption failed")]
    DecryptionFailure,
    #[error("a different state key is already provisioned")]
    KeyAlreadyProvisioned,
    #[error("state key not provisioned")]
    NotProvisioned,
    #[error("client authentication failed")]
    ClientAuthFailure,
    #[error("state verification failed")]
    StateVerificationFailure,
    #[error("malformed request")]
    MalformedRequest,
    #[error("sealed identity failed authentication")]
    UnsealAuthenticationFailure,
}

impl From<ShimError> for CceError {
    fn from(e: ShimError) -> Self {
        match e {
            ShimError::StateVerificationFailure => CceError::StateVerificationFailure,
            ShimError::DecryptionFailure => CceError::DecryptionFailure,
        }
    }
}

/// Public identity of a chaincode enclave. `chain` pins the genesis the
/// enclave was set up with, so an enclave bootstrapped on a forged chain
/// cannot pass for one of ours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EnclaveKey {
    pub signing: PublicKey,
    pub encryption: BoxPublicKey,
    pub chain: Digest,
}

/// A chaincode call: function name and argument list.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Operation {
    pub function: String,
    pub args: Vec<Vec<u8>>,
}

impl Operation {
    pub fn new(function: &str, args: Vec<Vec<u8>>) -> Self {
        Self { function: function.to_owned(), args }
    }

    pub fn arg_str(&self, i: usize) -> Option<&str> {
        self.args.get(i).and_then(|a| std::str::from_utf8(a).ok())
    }

    pub fn arg_u64(&self, i: usize) -> Option<u64> {
        self.args.get(i).and_then(|a| codec::decode(a).ok())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationBody {
    pub client_id: String,
    pub chaincode_id: String,
    /// Must equal the enclosing proposal's nonce.
    pub nonce: [u8; 16],
    pub operation: Operation,
    /// Where to encrypt the result; `None` withholds a private result.
    pub result_key: Option<BoxPublicKey>,
    /// State key for client-based encryption.
    pub data_key: Option<SymmetricKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedOperation {
    pub body: OperationBody,
    pub signature: Signature,
}

fn operation_message(body: &OperationBody) -> Vec<u8> {
    codec::encode(&("operation/v1", body))
}

/// Application-level result of one invocation.
pub type ChaincodeResult = Result<Vec<u8>, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndorsedResult {
    Public(ChaincodeResult),
    Sealed(Envelope),
    Withheld,
}

pub struct InvocationContext {
    pub client_id: String,
    pub operation: Operation,
}

pub struct ChaincodeOutput {
    pub payload: Vec<u8>,
    /// Returned in the clear instead of being encrypted for the caller.
    pub public: bool,
}

pub enum InvokeError {
    State(ShimError),
    /// Application failure, identified by a stable code.
    App(String),
}

impl From<ShimError> for InvokeError {
    fn from(e: ShimError) -> Self {
        InvokeError::State(e)
    }
}

/// Contract logic. Must be deterministic given its state reads.
pub trait Chaincode: Send + Sync + 'static {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn invoke(&self, ctx: &InvocationContext, shim: &mut dyn Shim) -> Result<ChaincodeOutput, InvokeError>;
}

pub fn chaincode_identity(chaincode: &dyn Chaincode) -> CodeIdentity {
    CodeIdentity::new(format!("chaincode/{}", chaincode.name()), chaincode.version())
}

#[derive(Clone, Serialize, Deserialize)]
struct CcState {
    config: ChainConfig,
    genesis_hash: Digest,
    signing: [u8; 32],
    encryption: [u8; 32],
    mode: EncryptionMode,
    bound_le: Option<PublicKey>,
    data_key: Option<SymmetricKey>,
}

impl CcState {
    fn public(&self) -> EnclaveKey {
        EnclaveKey {
            signing: SigningKeyPair::from_secret_bytes(self.signing).public(),
            encryption: BoxKeyPair::from_secret_bytes(self.encryption).public(),
            chain: self.genesis_hash,
        }
    }
}

/// Key provisioning message, encrypted to the enclave and signed by the
/// consortium admin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyProvision {
    pub key: SymmetricKey,
    pub chain: Digest,
    pub signature: Signature,
}

fn provision_message(key: &SymmetricKey, chain: &Digest) -> Vec<u8> {
    codec::encode(&("provision/v1", key, chain))
}

/// The chaincode enclave program.
pub struct ChaincodeEnclaveProgram {
    chaincode: Arc<dyn Chaincode>,
    weak: Weakenings,
    state: Option<CcState>,
}

impl ChaincodeEnclaveProgram {
    pub fn new(chaincode: Arc<dyn Chaincode>, weak: Weakenings) -> Self {
        Self { chaincode, weak, state: None }
    }

    fn state(&self) -> Result<&CcState, CceError> {
        self.state.as_ref().ok_or(CceError::NotSetUp)
    }

    fn setup(&mut self, env: &mut EnclaveEnv<'_>, args: &[u8]) -> Result<(EnclaveKey, AttestationReport), CceError> {
        if self.state.is_some() {
            return Err(CceError::AlreadySetup);
        }
        let genesis: Block = codec::decode(args).map_err(|_| CceError::MalformedRequest)?;
        let config = genesis.genesis_config().map_err(|_| CceError::MalformedRequest)?.clone();
        let mode = config
            .chaincode(self.chaincode.name())
            .and_then(|d| d.enclave.as_ref())
            .map(|e| e.encryption)
            .ok_or(CceError::UnknownChaincode)?;
        let signing = SigningKeyPair::generate(env.rng()).secret_bytes();
        let encryption = BoxKeyPair::generate(env.rng()).secret_bytes();
        let state =
            CcState { config, genesis_hash: genesis.hash(), signing, encryption, mode, bound_le: None, data_key: None };
        let key = state.public();
        let quote =
            env.remote_quote(crate::registry::key_commitment(&key)).map_err(|_| CceError::UncertifiedPlatform)?;
        self.state = Some(state);
        Ok((key, quote))
    }

    fn bind(&mut self, env: &EnclaveEnv<'_>, args: &[u8]) -> Result<(), CceError> {
        let st = self.state.as_mut().ok_or(CceError::NotSetUp)?;
        let (ledger_key, report): (PublicKey, AttestationReport) =
            codec::decode(args).map_err(|_| CceError::MalformedRequest)?;
        let accepted = env.verify_local_report(&report)
            && report.measurement == st.config.ledger_enclave_measurement
            && report.report_data == binding_report_data(&ledger_key, &st.genesis_hash);
        if !accepted {
            return Err(CceError::BindRejected);
        }
        st.bound_le = Some(ledger_key);
        Ok(())
    }

    fn provision(&mut self, args: &[u8]) -> Result<(), CceError> {
        let st = self.state.as_mut().ok_or(CceError::NotSetUp)?;
        if st.bound_le.is_none() {
            return Err(CceError::NotBound);
        }
        if st.mode != EncryptionMode::PerChaincode {
            return Err(CceError::WrongMode);
        }
        let envelope: Envelope = codec::decode(args).map_err(|_| CceError::MalformedRequest)?;
        let plain = hybrid_decrypt(&BoxKeyPair::from_secret_bytes(st.encryption), &envelope)
            .map_err(|_| CceError::DecryptionFailure)?;
        let p: KeyProvision = codec::decode(&plain).map_err(|_| CceError::MalformedRequest)?;
        let admin = st.config.client(&st.config.admin).ok_or(CceError::ClientAuthFailure)?;
        if p.chain != st.genesis_hash || !crypto::verify(&admin.key, &provision_message(&p.key, &p.chain), &p.signature)
        {
            return Err(CceError::ClientAuthFailure);
        }
        match st.data_key {
            Some(existing) if existing != p.key => Err(CceError::KeyAlreadyProvisioned),
            _ => {
                st.data_key = Some(p.key);
                Ok(())
            }
        }
    }

    fn open_operation(st: &CcState, proposal: &TransactionProposal) -> Result<OperationBody, CceError> {
        let me = SigningKeyPair::from_secret_bytes(st.signing).public();
        let ProposalPayload::Sealed(envelopes) = &proposal.payload else {
            return Err(CceError::MalformedRequest);
        };
        let envelope = envelopes.iter().find(|(k, _)| k == &me).map(|(_, e)| e).ok_or(CceError::DecryptionFailure)?;
        let plain = hybrid_decrypt(&BoxKeyPair::from_secret_bytes(st.encryption), envelope)
            .map_err(|_| CceError::DecryptionFailure)?;
        let signed: SignedOperation = codec::decode(&plain).map_err(|_| CceError::MalformedRequest)?;
        let b = &signed.body;
        let client = st.config.client(&b.client_id).ok_or(CceError::ClientAuthFailure)?;
        let bound =
            b.client_id == proposal.client_id && b.chaincode_id == proposal.chaincode_id && b.nonce == proposal.nonce;
        if !bound || !crypto::verify(&client.key, &operation_message(b), &signed.signature) {
            return Err(CceError::ClientAuthFailure);
        }
        Ok(signed.body)
    }

    fn invoke(&mut self, env: &mut EnclaveEnv<'_>, args: &[u8], host: &mut dyn Host) -> Result<Endorsement, CceError> {
        let st = self.state()?.clone();
        let ledger_key = st.bound_le.ok_or(CceError::NotBound)?;
        let proposal: TransactionProposal = codec::decode(args).map_err(|_| CceError::MalformedRequest)?;
        if proposal.chaincode_id != self.chaincode.name() {
            return Err(CceError::MalformedRequest);
        }
        let body = Self::open_operation(&st, &proposal)?;
        let data_key = match st.mode {
            EncryptionMode::None => None,
            EncryptionMode::PerChaincode => Some(st.data_key.ok_or(CceError::NotProvisioned)?),
            EncryptionMode::ClientBased => Some(body.data_key.ok_or(CceError::MalformedRequest)?),
        };
        let proposal_digest = proposal.digest();
        let ctx = InvocationContext { client_id: body.client_id.clone(), operation: body.operation.clone() };
        let (outcome, reads, writes) = {
            let mut shim = shim::EnclaveShim {
                host,
                env,
                ledger_key,
                namespace: self.chaincode.name().to_owned(),
                data_key,
                proposal_digest,
                trust_host: self.weak.skip_meta_signature,
                reads: ReadSet::new(),
                writes: WriteSet::new(),
                pending: BTreeMap::new(),
            };
            let outcome = self.chaincode.invoke(&ctx, &mut shim);
            (outcome, shim.reads, shim.writes)
        };
        let (result, public, writes) = match outcome {
            Ok(out) => (Ok(out.payload), out.public, writes),
            Err(InvokeError::App(code)) => (Err(code), false, WriteSet::new()),
            Err(InvokeError::State(e)) => return Err(e.into()),
        };
        let endorsed = if public {
            EndorsedResult::Public(result)
        } else if let Some(k) = body.result_key {
            EndorsedResult::Sealed(hybrid_encrypt(&k, &codec::encode(&result), env.rng()))
        } else {
            EndorsedResult::Withheld
        };
        let signing = SigningKeyPair::from_secret_bytes(st.signing);
        let body = EndorsementBody {
            proposal_digest,
            chaincode_id: proposal.chaincode_id.clone(),
            read_set: reads,
            write_set: writes,
            result: codec::encode(&endorsed),
        };
        Ok(Endorsement::sign(body, EndorserId::Enclave(signing.public()), &signing))
    }

    fn restore(&mut self, env: &EnclaveEnv<'_>, args: &[u8]) -> Result<EnclaveKey, CceError> {
        if self.state.is_some() {
            return Err(CceError::AlreadySetup);
        }
        let blob: SealedBlob = codec::decode(args).map_err(|_| CceError::MalformedRequest)?;
        let bytes = env.unseal(&blob).map_err(|_| CceError::UnsealAuthenticationFailure)?;
        let st: CcState = codec::decode(&bytes).map_err(|_| CceError::UnsealAuthenticationFailure)?;
        let key = st.public();
        self.state = Some(st);
        Ok(key)
    }
}

fn respond<T: Serialize>(r: Result<T, CceError>) -> Vec<u8> {
    codec::encode(&r)
}

impl EnclaveProgram for ChaincodeEnclaveProgram {
    fn code_identity(&self) -> CodeIdentity {
        chaincode_identity(self.chaincode.as_ref())
    }

    fn call(
        &mut self,
        env: &mut EnclaveEnv<'_>,
        entry_point: &str,
        args: &[u8],
        host: &mut dyn Host,
    ) -> Result<Vec<u8>, TeeError> {
        Ok(match entry_point {
            "setup" => respond(self.setup(env, args)),
            "bind" => respond(self.bind(env, args)),
            "provision" => respond(self.provision(args)),
            "invoke" => respond(self.invoke(env, args, host)),
            "seal_identity" => {
                let bytes = self.state().map(codec::encode);
                respond(bytes.map(|b| env.seal(&b)))
            }
            "restore" => respond(self.restore(env, args)),
            "public_key" => respond(self.state().map(CcState::public)),
            other => return Err(TeeError::UnknownEntryPoint(other.to_owned())),
        })
    }
}

// Host-side wrappers.

fn call<T: serde::de::DeserializeOwned>(
    cc: &mut EnclaveInstance,
    entry: &str,
    args: &[u8],
    host: &mut dyn Host,
) -> Result<T, CceError> {
    let out = cc.ecall(entry, args, host).map_err(|_| CceError::MalformedRequest)?;
    codec::decode::<Result<T, CceError>>(&out).map_err(|_| CceError::MalformedRequest)?
}

pub fn cce_setup(cc: &mut EnclaveInstance, genesis: &Block) -> Result<(EnclaveKey, AttestationReport), CceError> {
    call(cc, "setup", &codec::encode(genesis), &mut crate::tee::NoHost)
}

pub fn cce_bind_ledger(
    cc: &mut EnclaveInstance,
    ledger_key: &PublicKey,
    report: &AttestationReport,
) -> Result<(), CceError> {
    call(cc, "bind", &codec::encode(&(ledger_key, report)), &mut crate::tee::NoHost)
}

pub fn cce_provision_key(cc: &mut EnclaveInstance, envelope: &Envelope) -> Result<(), CceError> {
    call(cc, "provision", &codec::encode(envelope), &mut crate::tee::NoHost)
}

pub fn cce_invoke(
    cc: &mut EnclaveInstance,
    proposal: &TransactionProposal,
    access: &mut dyn StateAccess,
) -> Result<Endorsement, CceError> {
    call(cc, "invoke", &codec::encode(proposal), &mut OcallHost { access })
}

pub fn cce_seal_identity(cc: &mut EnclaveInstance) -> Result<SealedBlob, CceError> {
    call(cc, "seal_identity", &[], &mut crate::tee::NoHost)
}

pub fn cce_restore(cc: &mut EnclaveInstance, blob: &SealedBlob) -> Result<EnclaveKey, CceError> {
    call(cc, "restore", &codec::encode(blob), &mut crate::tee::NoHost)
}

pub fn cce_public_key(cc: &mut EnclaveInstance) -> Result<EnclaveKey, CceError> {
    call(cc, "public_key", &[], &mut crate::tee::NoHost)
}

// Client-side helpers.

/// Builds a proposal whose operation is signed by the client and encrypted
/// separately to each target enclave.
#[allow(clippy::too_many_arguments)]
pub fn seal_operation(
    client_id: &str,
    client_key: &SigningKeyPair,
    chaincode_id: &str,
    operation: Operation,
    result_key: Option<BoxPublicKey>,
    data_key: Option<SymmetricKey>,
    recipients: &[EnclaveKey],
    rng: &mut (impl RngCore + CryptoRng),
) -> TransactionProposal {
    let mut nonce = [0u8; 16];
    rng.fill_bytes(&mut nonce);
    let body = OperationBody {
        client_id: client_id.to_owned(),
        chaincode_id: chaincode_id.to_owned(),
        nonce,
        operation,
        result_key,
        data_key,
    };
    let signature = client_key.sign(&operation_message(&body));
    let plain = codec::encode(&SignedOperation { body, signature });
    let envelopes = recipients.iter().map(|r| (r.signing, hybrid_encrypt(&r.encryption, &plain, rng))).collect();
    TransactionProposal {
        client_id: client_id.to_owned(),
        chaincode_id: chaincode_id.to_owned(),
        payload: ProposalPayload::Sealed(envelopes),
        nonce,
    }
}

/// Recovers an endorsement's result for a client holding `result_key`.
/// `None` if the result is withheld or not addressed to that key.
pub fn open_result(endorsement: &Endorsement, result_key: &BoxKeyPair) -> Option<ChaincodeResult> {
    match codec::decode::<EndorsedResult>(&endorsement.body.result).ok()? {
        EndorsedResult::Public(r) => Some(r),
        EndorsedResult::Sealed(env) => codec::decode(&hybrid_decrypt(result_key, &env).ok()?).ok(),
        EndorsedResult::Withheld => None,
    }
}

/// Admin-side construction of a key provisioning envelope.
pub fn make_provision(
    admin_key: &SigningKeyPair,
    data_key: &SymmetricKey,
    chain: &Digest,
    recipient: &EnclaveKey,
    rng: &mut (impl RngCore + CryptoRng),
) -> Envelope {
    let signature = admin_key.sign(&provision_message(data_key, chain));
    let plain = codec::encode(&KeyProvision { key: *data_key, chain: *chain, signature });
    hybrid_encrypt(&recipient.encryption, &plain, rng)
}

/// Result of running a chaincode on the unprotected reference path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NativeExecution {
    pub read_set: ReadSet,
    pub write_set: WriteSet,
    pub result: ChaincodeResult,
    pub public: bool,
}

/// Runs `chaincode` directly against `store`, without enclave protection.
/// A failed invocation discards its writes, as in the enclave.
pub fn execute_native(
    chaincode: &dyn Chaincode,
    store: &VersionedStore,
    client_id: &str,
    operation: &Operation,
) -> NativeExecution {
    let mut shim = NativeShim::new(store, chaincode.name());
    let ctx = InvocationContext { client_id: client_id.to_owned(), operation: operation.clone() };
    let outcome = chaincode.invoke(&ctx, &mut shim);
    match outcome {
        Ok(out) => NativeExecution {
            read_set: shim.reads,
            write_set: shim.writes,
            result: Ok(out.payload),
            public: out.public,
        },
        Err(InvokeError::App(code)) => {
            NativeExecution { read_set: shim.reads, write_set: WriteSet::new(), result: Err(code), public: false }
        }
        Err(InvokeError::State(_)) => unreachable!("native shim never fails verification"),
    }
}
