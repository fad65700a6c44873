//! Simulated trusted-execution substrate.
//!
//! An [`EnclaveInstance`] owns a measured program behind a private boundary:
//! the host can only reach it through [`EnclaveInstance::ecall`], and the
//! program can only reach the host through [`Host::ocall`]. Platform secrets
//! (seal-key root, local-attestation key, quoting key) live in [`Platform`]
//! and are exercised solely through [`EnclaveEnv`], which is handed to the
//! program for the duration of a call.

use std::collections::BTreeSet;
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::crypto::{
    self, byte_newtype, derive_key, derive_seal_key, Digest, PublicKey, SealedBlob, Signature, SigningKeyPair,
    SymmetricKey, Tag,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TeeError {
    #[error("unknown entry point `{0}`")]
    UnknownEntryPoint(String),
    #[error("platform is not certified by the attestation service")]
    UncertifiedPlatform,
    #[error("sealed blob failed authentication")]
    UnsealAuthenticationFailure,
}

byte_newtype!(
    /// Enclave-chosen content embedded in a report.
    ReportData,
    64
);

impl ReportData {
    /// Digest in the first half, zeros in the second.
    pub fn from_digest(d: &Digest) -> Self {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&d.0);
        Self(out)
    }
}

/// Stable identifier of an enclave program. Its hash is the measurement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeIdentity {
    pub name: String,
    pub version: String,
}

impl CodeIdentity {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        Self { name: name.into(), version: version.into() }
    }

    pub fn measurement(&self) -> Digest {
        codec::digest(&("enclave-code/v1", &self.name, &self.version))
    }
}

/// A simulated CPU: fused secret plus an attestation key pair.
pub struct Platform {
    id: String,
    secret: SymmetricKey,
    attestation_key: SigningKeyPair,
    certified: bool,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").field("id", &self.id).field("certified", &self.certified).finish_non_exhaustive()
    }
}

impl Platform {
    fn fresh(id: &str, certified: bool, rng: &mut ChaCha20Rng) -> Self {
        Self {
            id: id.to_owned(),
            secret: SymmetricKey::random(rng),
            attestation_key: SigningKeyPair::generate(rng),
            certified,
        }
    }

    /// A platform the attestation service never certified. Quoting fails.
    pub fn uncertified(id: &str, rng: &mut ChaCha20Rng) -> Arc<Self> {
        Arc::new(Self::fresh(id, false, rng))
    }

    /// A platform that believes it is certified but whose attestation key
    /// the service does not know, i.e. a forged platform key.
    pub fn forged(id: &str, rng: &mut ChaCha20Rng) -> Arc<Self> {
        Arc::new(Self::fresh(id, true, rng))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn attestation_public_key(&self) -> PublicKey {
        self.attestation_key.public()
    }

    fn report_key(&self) -> SymmetricKey {
        derive_key(&self.secret, b"report-key", b"")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportProof {
    /// Same-platform MAC.
    Local { platform_id: String, mac: Tag },
    /// Quote signed by a platform attestation key.
    Remote { platform_key: PublicKey, quote_signature: Signature },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    pub measurement: Digest,
    pub report_data: ReportData,
    pub proof: ReportProof,
}

impl AttestationReport {
    fn body(measurement: &Digest, report_data: &ReportData) -> Vec<u8> {
        codec::encode(&("report/v1", measurement, report_data))
    }

    pub fn digest(&self) -> Digest {
        codec::digest(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttestationOutcome {
    Valid,
    Invalid,
}

/// Signed statement of the attestation service about one report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationVerdict {
    pub report_digest: Digest,
    pub measurement: Digest,
    pub report_data: ReportData,
    pub outcome: AttestationOutcome,
    pub service_signature: Signature,
}

impl AttestationVerdict {
    fn body(
        report_digest: &Digest,
        measurement: &Digest,
        report_data: &ReportData,
        outcome: AttestationOutcome,
    ) -> Vec<u8> {
        codec::encode(&("verdict/v1", report_digest, measurement, report_data, outcome))
    }

    /// Checks the service signature using only the service's public key.
    pub fn verify(&self, service_key: &PublicKey) -> bool {
        let body = Self::body(&self.report_digest, &self.measurement, &self.report_data, self.outcome);
        crypto::verify(service_key, &body, &self.service_signature)
    }

    pub fn is_valid_for(&self, service_key: &PublicKey) -> bool {
        self.outcome == AttestationOutcome::Valid && self.verify(service_key)
    }
}

/// In-process stand-in for the remote attestation service.
pub struct AttestationService {
    key: SigningKeyPair,
    certified: RwLock<BTreeSet<PublicKey>>,
}

impl AttestationService {
    pub fn new(rng: &mut ChaCha20Rng) -> Self {
        Self { key: SigningKeyPair::generate(rng), certified: RwLock::new(BTreeSet::new()) }
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public()
    }

    /// Manufactures a genuine platform and certifies its attestation key.
    pub fn provision_platform(&self, id: &str, rng: &mut ChaCha20Rng) -> Arc<Platform> {
        let platform = Platform::fresh(id, true, rng);
        self.certified.write().unwrap().insert(platform.attestation_key.public());
        Arc::new(platform)
    }

    pub fn ias_verify(&self, report: &AttestationReport) -> AttestationVerdict {
        let outcome = match &report.proof {
            ReportProof::Remote { platform_key, quote_signature }
                if self.certified.read().unwrap().contains(platform_key)
                    && crypto::verify(
                        platform_key,
                        &AttestationReport::body(&report.measurement, &report.report_data),
                        quote_signature,
                    ) =>
            {
                AttestationOutcome::Valid
            }
            _ => AttestationOutcome::Invalid,
        };
        let report_digest = report.digest();
        let body = AttestationVerdict::body(&report_digest, &report.measurement, &report.report_data, outcome);
        AttestationVerdict {
            report_digest,
            measurement: report.measurement,
            report_data: report.report_data,
            outcome,
            service_signature: self.key.sign(&body),
        }
    }
}

/// Calls from an enclave out to its untrusted host.
pub trait Host {
    fn ocall(&mut self, name: &str, args: &[u8]) -> Vec<u8>;
}

/// Host that offers no services.
pub struct NoHost;

impl Host for NoHost {
    fn ocall(&mut self, _name: &str, _args: &[u8]) -> Vec<u8> {
        Vec::new()
    }
}

/// Capabilities available to a program while it runs inside an enclave.
pub struct EnclaveEnv<'a> {
    measurement: Digest,
    platform: &'a Platform,
    rng: &'a mut ChaCha20Rng,
}

impl EnclaveEnv<'_> {
    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    pub fn platform_id(&self) -> &str {
        &self.platform.id
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        self.rng
    }

    pub fn seal(&mut self, payload: &[u8]) -> SealedBlob {
        let key = derive_seal_key(&self.platform.secret, &self.measurement);
        SealedBlob::seal(&key, self.measurement, payload, self.rng)
    }

    /// Accepts any blob this measurement ever sealed on this platform,
    /// however old.
    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, TeeError> {
        if blob.producer_measurement != self.measurement {
            return Err(TeeError::UnsealAuthenticationFailure);
        }
        let key = derive_seal_key(&self.platform.secret, &self.measurement);
        blob.open(&key).map_err(|_| TeeError::UnsealAuthenticationFailure)
    }

    pub fn local_report(&self, report_data: ReportData) -> AttestationReport {
        let mac = crypto::mac(&self.platform.report_key(), &AttestationReport::body(&self.measurement, &report_data));
        AttestationReport {
            measurement: self.measurement,
            report_data,
            proof: ReportProof::Local { platform_id: self.platform.id.clone(), mac },
        }
    }

    /// True iff `report` is a local report produced on this same platform.
    pub fn verify_local_report(&self, report: &AttestationReport) -> bool {
        match &report.proof {
            ReportProof::Local { mac, .. } => crypto::mac_verify(
                &self.platform.report_key(),
                &AttestationReport::body(&report.measurement, &report.report_data),
                mac,
            ),
            ReportProof::Remote { .. } => false,
        }
    }

    /// Remote quote: a local report checked and countersigned by the
    /// platform's quoting facility.
    pub fn remote_quote(&self, report_data: ReportData) -> Result<AttestationReport, TeeError> {
        if !self.platform.certified {
            return Err(TeeError::UncertifiedPlatform);
        }
        let local = self.local_report(report_data);
        debug_assert!(self.verify_local_report(&local));
        let quote_signature =
            self.platform.attestation_key.sign(&AttestationReport::body(&local.measurement, &local.report_data));
        Ok(AttestationReport {
            measurement: local.measurement,
            report_data,
            proof: ReportProof::Remote { platform_key: self.platform.attestation_key.public(), quote_signature },
        })
    }
}

/// Code that runs inside an enclave.
pub trait EnclaveProgram: Send + 'static {
    fn code_identity(&self) -> CodeIdentity;

    fn init(&mut self, _env: &mut EnclaveEnv<'_>) {}

    /// Dispatches one entry point. Application-level failures belong in the
    /// returned payload; only an unknown entry point is an `Err`.
    fn call(
        &mut self,
        env: &mut EnclaveEnv<'_>,
        entry_point: &str,
        args: &[u8],
        host: &mut dyn Host,
    ) -> Result<Vec<u8>, TeeError>;
}

/// A measured, isolated execution context.
pub struct EnclaveInstance {
    measurement: Digest,
    platform: Arc<Platform>,
    rng: ChaCha20Rng,
    program: Box<dyn EnclaveProgram>,
}

impl std::fmt::Debug for EnclaveInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnclaveInstance")
            .field("measurement", &self.measurement)
            .field("platform", &self.platform.id)
            .finish_non_exhaustive()
    }
}

impl EnclaveInstance {
    /// Loads `program` on `platform`. `seed` drives all in-enclave randomness.
    pub fn create(platform: Arc<Platform>, program: impl EnclaveProgram, seed: u64) -> Self {
        let measurement = program.code_identity().measurement();
        let mut instance =
            Self { measurement, platform, rng: ChaCha20Rng::seed_from_u64(seed), program: Box::new(program) };
        let mut env = EnclaveEnv { measurement, platform: &instance.platform, rng: &mut instance.rng };
        instance.program.init(&mut env);
        instance
    }

    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    pub fn platform_id(&self) -> &str {
        &self.platform.id
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    pub fn ecall(&mut self, entry_point: &str, args: &[u8], host: &mut dyn Host) -> Result<Vec<u8>, TeeError> {
        let mut env = EnclaveEnv { measurement: self.measurement, platform: &self.platform, rng: &mut self.rng };
        self.program.call(&mut env, entry_point, args, host)
    }
}

/// Test enclave exposing the raw platform capabilities as entry points.
pub struct EchoProgram {
    pub version: String,
}

impl EnclaveProgram for EchoProgram {
    fn code_identity(&self) -> CodeIdentity {
        CodeIdentity::new("echo", self.version.clone())
    }

    fn call(
        &mut self,
        env: &mut EnclaveEnv<'_>,
        entry_point: &str,
        args: &[u8],
        host: &mut dyn Host,
    ) -> Result<Vec<u8>, TeeError> {
        let report_data = || ReportData::from_digest(&crypto::hash(args));
        Ok(match entry_point {
            "echo" => args.to_vec(),
            "random" => {
                let mut out = [0u8; 8];
                rand::RngCore::fill_bytes(env.rng(), &mut out);
                out.to_vec()
            }
            "ocall" => host.ocall("echo", args),
            "local_report" => codec::encode(&env.local_report(report_data())),
            "verify_local" => {
                let ok = codec::decode::<AttestationReport>(args).map(|r| env.verify_local_report(&r)).unwrap_or(false);
                vec![ok as u8]
            }
            "quote" => codec::encode(&env.remote_quote(report_data()).map_err(|e| e.to_string())),
            "seal" => codec::encode(&env.seal(args)),
            "unseal" => {
                let blob: SealedBlob = codec::decode(args).map_err(|_| TeeError::UnsealAuthenticationFailure)?;
                codec::encode(&env.unseal(&blob).map_err(|e| e.to_string()))
            }
            other => return Err(TeeError::UnknownEntryPoint(other.to_owned())),
        })
    }
}
