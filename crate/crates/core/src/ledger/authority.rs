//! Trust roots of the permissioned ledger: the certificate authority that
//! binds anywise DIDs to roles, and the membership service provider (MSP)
//! that turns certificates into channel permissions. The MSP also keeps the
//! recovery material patients entrust to it.

use std::collections::BTreeMap;
use std::str::FromStr;

use parking_lot::Mutex;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::ChannelId;
use crate::clock::Timestamp;
use crate::codec;
use crate::crypto::{self, KeyPair, PublicKey, Signature};
use crate::identity::{Did, DidDocument};

/// Certificate lifetime in ticks (one simulated year).
pub const DEFAULT_CERT_VALIDITY: u64 = 365 * 24 * 3600;

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
pub enum AuthorityError {
    #[error("CSR signature does not match its public key")]
    SignatureMismatch,
    #[error("CSR public key differs from the DID document key")]
    DidKeyMismatch,
    #[error("DID document does not hash to the subject DID")]
    IntegrityMismatch,
    #[error("only anywise DIDs can be certified")]
    NotAnywise,
    #[error("unsupported role claim {0:?}")]
    UnsupportedRole(String),
    #[error("certificate is not signed by the CA")]
    InvalidCertificate,
    #[error("certificate expired at {0}")]
    ExpiredCertificate(Timestamp),
    #[error("no identity record for {0:?}")]
    UnknownIdentity(String),
    #[error("CA signing failed")]
    Signing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Patient,
    Practitioner,
    Laboratory,
    Admin,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Patient, Role::Practitioner, Role::Laboratory, Role::Admin];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Patient => "Patient",
            Role::Practitioner => "Practitioner",
            Role::Laboratory => "Laboratory",
            Role::Admin => "Admin",
        }
    }
}

impl FromStr for Role {
    type Err = AuthorityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| AuthorityError::UnsupportedRole(s.to_string()))
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who is acting on the ledger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Principal {
    Member(Role),
    Msp,
}

/// An authorized ledger identity. Only the MSP hands these out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub(crate) did: Option<Did>,
    pub(crate) principal: Principal,
}

impl Identity {
    pub fn did(&self) -> Option<&Did> {
        self.did.as_ref()
    }

    pub fn principal(&self) -> Principal {
        self.principal
    }

    pub fn role(&self) -> Option<Role> {
        match self.principal {
            Principal::Member(role) => Some(role),
            Principal::Msp => None,
        }
    }

    /// Label written into transactions as the submitter.
    pub fn label(&self) -> String {
        match &self.did {
            Some(did) => did.to_string(),
            None => "msp".to_string(),
        }
    }

    #[cfg(test)]
    pub(crate) fn for_tests(did: Option<Did>, principal: Principal) -> Self {
        Identity { did, principal }
    }
}

/// Certificate signing request. `identity_handle` is the applicant's
/// real-world identity reference, kept by the CA for emergencies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificateRequest {
    pub subject_did: Did,
    pub subject_doc: DidDocument,
    pub public_key: PublicKey,
    pub role_claim: String,
    pub identity_handle: String,
    pub applicant_signature: Signature,
}

#[derive(Serialize)]
struct CsrBody<'a> {
    subject_did: &'a Did,
    subject_doc: &'a DidDocument,
    public_key: &'a PublicKey,
    role_claim: &'a str,
    identity_handle: &'a str,
}

impl CertificateRequest {
    fn body_bytes(&self) -> Vec<u8> {
        codec::to_canonical_vec(&CsrBody {
            subject_did: &self.subject_did,
            subject_doc: &self.subject_doc,
            public_key: &self.public_key,
            role_claim: &self.role_claim,
            identity_handle: &self.identity_handle,
        })
    }

    /// Builds a request signed with `key`.
    pub fn new(
        key: &KeyPair,
        doc: &DidDocument,
        role_claim: &str,
        identity_handle: &str,
    ) -> Result<Self, crypto::CryptoError> {
        let mut csr = CertificateRequest {
            subject_did: doc.did.clone(),
            subject_doc: doc.clone(),
            public_key: key.public_key,
            role_claim: role_claim.to_string(),
            identity_handle: identity_handle.to_string(),
            applicant_signature: Signature([0u8; 64]),
        };
        csr.applicant_signature = key.sign(&csr.body_bytes())?;
        Ok(csr)
    }
}

/// Structural stand-in for an X.509 certificate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub serial: u64,
    pub subject_did: Did,
    pub subject_public_key: PublicKey,
    pub role_claim: Role,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub ca_signature: Signature,
}

#[derive(Serialize)]
struct CertBody<'a> {
    serial: u64,
    subject_did: &'a Did,
    subject_public_key: &'a PublicKey,
    role_claim: Role,
    issued_at: Timestamp,
    expires_at: Timestamp,
}

impl Certificate {
    fn body_bytes(&self) -> Vec<u8> {
        codec::to_canonical_vec(&CertBody {
            serial: self.serial,
            subject_did: &self.subject_did,
            subject_public_key: &self.subject_public_key,
            role_claim: self.role_claim,
            issued_at: self.issued_at,
            expires_at: self.expires_at,
        })
    }

    pub fn verify(&self, ca_key: &PublicKey) -> bool {
        crypto::verify(ca_key, &self.body_bytes(), &self.ca_signature)
    }
}

#[derive(Default)]
struct CaRecords {
    next_serial: u64,
    did_by_identity: BTreeMap<String, Did>,
}

pub struct CertificateAuthority {
    keypair: KeyPair,
    validity: u64,
    records: Mutex<CaRecords>,
}

impl CertificateAuthority {
    pub fn new<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        CertificateAuthority {
            keypair: crypto::generate_keypair(rng),
            validity: DEFAULT_CERT_VALIDITY,
            records: Mutex::new(CaRecords::default()),
        }
    }

    pub fn with_validity(mut self, ticks: u64) -> Self {
        self.validity = ticks;
        self
    }

    pub fn root_key(&self) -> PublicKey {
        self.keypair.public_key
    }

    pub fn ca_issue_certificate(
        &self,
        csr: &CertificateRequest,
        now: Timestamp,
    ) -> Result<Certificate, AuthorityError> {
        if !crypto::verify(&csr.public_key, &csr.body_bytes(), &csr.applicant_signature) {
            return Err(AuthorityError::SignatureMismatch);
        }
        if csr.subject_doc.check_binding(&csr.subject_did).is_err() {
            return Err(AuthorityError::IntegrityMismatch);
        }
        if !csr.subject_did.is_anywise() {
            return Err(AuthorityError::NotAnywise);
        }
        if csr.subject_doc.verification_key != csr.public_key {
            return Err(AuthorityError::DidKeyMismatch);
        }
        let role: Role = csr.role_claim.parse()?;

        let mut records = self.records.lock();
        records.next_serial += 1;
        let mut cert = Certificate {
            serial: records.next_serial,
            subject_did: csr.subject_did.clone(),
            subject_public_key: csr.public_key,
            role_claim: role,
            issued_at: now,
            expires_at: now.plus(self.validity),
            ca_signature: Signature([0u8; 64]),
        };
        cert.ca_signature = self.keypair.sign(&cert.body_bytes()).map_err(|_| AuthorityError::Signing)?;
        records.did_by_identity.insert(csr.identity_handle.clone(), csr.subject_did.clone());
        Ok(cert)
    }

    /// DID registered for a real-world identity reference.
    pub fn resolve_identity(&self, identity_handle: &str) -> Result<Did, AuthorityError> {
        self.records
            .lock()
            .did_by_identity
            .get(identity_handle)
            .cloned()
            .ok_or_else(|| AuthorityError::UnknownIdentity(identity_handle.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Authorization {
    pub role: Role,
    pub channels: Vec<ChannelId>,
    pub identity: Identity,
}

/// Recovery and emergency material a patient leaves with the MSP.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MspCustody {
    #[serde(with = "opt_b58")]
    pub share_msp: Option<Vec<u8>>,
    pub contacts: Vec<Did>,
}

mod opt_b58 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|b| crate::codec::b58(b)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        use serde::de::Error;
        Option::<String>::deserialize(d)?
            .map(|t| crate::codec::from_b58(&t).ok_or_else(|| D::Error::custom("invalid base58")))
            .transpose()
    }
}

pub struct Msp {
    ca_key: PublicKey,
    custody: Mutex<BTreeMap<Did, MspCustody>>,
}

impl Msp {
    pub fn new(ca_key: PublicKey) -> Self {
        Msp { ca_key, custody: Mutex::new(BTreeMap::new()) }
    }

    /// The MSP's own ledger identity.
    pub fn identity(&self) -> Identity {
        Identity { did: None, principal: Principal::Msp }
    }

    pub fn msp_authorize(&self, cert: &Certificate, now: Timestamp) -> Result<Authorization, AuthorityError> {
        if !cert.verify(&self.ca_key) {
            return Err(AuthorityError::InvalidCertificate);
        }
        if now >= cert.expires_at {
            return Err(AuthorityError::ExpiredCertificate(cert.expires_at));
        }
        let principal = Principal::Member(cert.role_claim);
        Ok(Authorization {
            role: cert.role_claim,
            channels: super::channels_for(principal),
            identity: Identity { did: Some(cert.subject_did.clone()), principal },
        })
    }

    pub fn store_recovery_share(&self, patient: &Did, share: Vec<u8>, contacts: Vec<Did>) {
        let mut custody = self.custody.lock();
        let entry = custody.entry(patient.clone()).or_default();
        entry.share_msp = Some(share);
        entry.contacts = contacts;
    }

    /// Contact list only, for patients who decline the backup mechanism.
    pub fn store_contacts(&self, patient: &Did, contacts: Vec<Did>) {
        self.custody.lock().entry(patient.clone()).or_default().contacts = contacts;
    }

    pub fn custody(&self, patient: &Did) -> Option<MspCustody> {
        self.custody.lock().get(patient).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{create_did, DidKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn applicant(rng: &mut ChaCha20Rng) -> (KeyPair, DidDocument) {
        let key = crypto::generate_keypair(rng);
        let (_, doc) = create_did(DidKind::Anywise, &key, "mediator", Timestamp(0)).unwrap();
        (key, doc)
    }

    #[test]
    fn role_parsing() {
        assert_eq!("patient".parse::<Role>().unwrap(), Role::Patient);
        assert_eq!(
            "ForeignPatient".parse::<Role>(),
            Err(AuthorityError::UnsupportedRole("ForeignPatient".into()))
        );
    }

    #[test]
    fn well_formed_csr_gets_signed_certificate() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ca = CertificateAuthority::new(&mut rng);
        let (key, doc) = applicant(&mut rng);
        let csr = CertificateRequest::new(&key, &doc, "Patient", "alice-id").unwrap();
        let cert = ca.ca_issue_certificate(&csr, Timestamp(10)).unwrap();
        assert!(cert.verify(&ca.root_key()));
        assert_eq!(cert.role_claim, Role::Patient);
        assert_eq!(ca.resolve_identity("alice-id").unwrap(), doc.did);
    }

    #[test]
    fn csr_signed_with_other_key_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ca = CertificateAuthority::new(&mut rng);
        let (key, doc) = applicant(&mut rng);
        let other = crypto::generate_keypair(&mut rng);
        let mut csr = CertificateRequest::new(&other, &doc, "Patient", "x").unwrap();
        csr.public_key = key.public_key;
        assert_eq!(ca.ca_issue_certificate(&csr, Timestamp(0)), Err(AuthorityError::SignatureMismatch));
    }

    #[test]
    fn csr_key_must_match_did_document() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ca = CertificateAuthority::new(&mut rng);
        let (_, doc) = applicant(&mut rng);
        let other = crypto::generate_keypair(&mut rng);
        let csr = CertificateRequest::new(&other, &doc, "Patient", "x").unwrap();
        assert_eq!(ca.ca_issue_certificate(&csr, Timestamp(0)), Err(AuthorityError::DidKeyMismatch));
    }

    #[test]
    fn msp_maps_roles_to_channels() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let ca = CertificateAuthority::new(&mut rng);
        let msp = Msp::new(ca.root_key());
        let (key, doc) = applicant(&mut rng);
        let csr = CertificateRequest::new(&key, &doc, "Patient", "p").unwrap();
        let cert = ca.ca_issue_certificate(&csr, Timestamp(0)).unwrap();
        let auth = msp.msp_authorize(&cert, Timestamp(1)).unwrap();
        assert_eq!(auth.role, Role::Patient);
        assert_eq!(auth.channels, vec![ChannelId::Dids, ChannelId::Backups, ChannelId::Registries]);
    }

    #[test]
    fn msp_rejects_tampered_and_expired() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let ca = CertificateAuthority::new(&mut rng).with_validity(100);
        let msp = Msp::new(ca.root_key());
        let (key, doc) = applicant(&mut rng);
        let csr = CertificateRequest::new(&key, &doc, "Practitioner", "d").unwrap();
        let cert = ca.ca_issue_certificate(&csr, Timestamp(0)).unwrap();
        let mut tampered = cert.clone();
        tampered.role_claim = Role::Admin;
        assert_eq!(msp.msp_authorize(&tampered, Timestamp(1)), Err(AuthorityError::InvalidCertificate));
        assert_eq!(
            msp.msp_authorize(&cert, Timestamp(100)),
            Err(AuthorityError::ExpiredCertificate(Timestamp(100)))
        );
    }
}
