//! Verifiable credentials with salted per-claim commitments, and
//! presentations that disclose a chosen subset of claims to one audience.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::agents::WalletStore;
use crate::clock::Timestamp;
use crate::codec::{self, b58_bytes};
use crate::crypto::{self, Digest, PublicKey, Signature};
use crate::identity::{Did, DidStore};
use crate::ledger::{Ledger, LedgerAnchor};
use crate::revocation::{self, Cid, NonRevocationProof, RegistryId, RevocationError, RevocationRegistry};

/// Claim name linking a derived credential to the one it was issued against.
pub const PARENT_CID_CLAIM: &str = "parent_cid";

const CLAIM_SEPARATOR: u8 = 0x1F;

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
pub enum CredentialError {
    #[error("issuer DID is not registered on the ledger")]
    UnregisteredIssuer,
    #[error("issuer has no revocation registry")]
    RegistryUnavailable,
    #[error("unknown claim {0:?}")]
    UnknownClaim(String),
    #[error("nothing to disclose")]
    EmptyDisclosure,
    #[error("credential {0} not held")]
    UnknownCredential(Cid),
    #[error("referenced credentials have different subjects")]
    MixedSubjects,
    #[error("duplicate claim name {0:?}")]
    DuplicateClaim(String),
    #[error(transparent)]
    Revocation(#[from] RevocationError),
    #[error("signing failed")]
    Signing,
}

b58_bytes!(Salt, 16);
b58_bytes!(VpId, 16);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub name: String,
    pub value: String,
    pub salt: Salt,
}

impl Claim {
    pub fn new<R: RngCore + CryptoRng + ?Sized>(name: &str, value: &str, rng: &mut R) -> Self {
        Claim { name: name.to_string(), value: value.to_string(), salt: Salt::random(rng) }
    }

    /// `H(name ‖ 0x1F ‖ value ‖ 0x1F ‖ salt)`
    pub fn digest(&self) -> Digest {
        crypto::hash_parts(&[
            self.name.as_bytes(),
            &[CLAIM_SEPARATOR],
            self.value.as_bytes(),
            &[CLAIM_SEPARATOR],
            self.salt.as_bytes(),
        ])
    }
}

/// The signed part of a credential. It carries digests only, so it can be
/// shown without revealing any claim.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialEnvelope {
    pub cid: Cid,
    pub issuer_did: Did,
    pub issuer_key: PublicKey,
    pub subject_did: Did,
    pub claim_digests: Vec<Digest>,
    pub registry_id: RegistryId,
    pub issued_at: Timestamp,
    pub signature: Signature,
}

#[derive(Serialize)]
struct EnvelopeBody<'a> {
    cid: &'a Cid,
    issuer_did: &'a Did,
    issuer_key: &'a PublicKey,
    subject_did: &'a Did,
    claim_digests: &'a [Digest],
    registry_id: &'a RegistryId,
    issued_at: Timestamp,
}

impl CredentialEnvelope {
    pub fn signing_bytes(&self) -> Vec<u8> {
        codec::to_canonical_vec(&EnvelopeBody {
            cid: &self.cid,
            issuer_did: &self.issuer_did,
            issuer_key: &self.issuer_key,
            subject_did: &self.subject_did,
            claim_digests: &self.claim_digests,
            registry_id: &self.registry_id,
            issued_at: self.issued_at,
        })
    }

    pub fn signature_ok(&self) -> bool {
        crypto::verify(&self.issuer_key, &self.signing_bytes(), &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiableCredential {
    pub envelope: CredentialEnvelope,
    pub claims: Vec<Claim>,
}

impl VerifiableCredential {
    pub fn cid(&self) -> Cid {
        self.envelope.cid
    }

    pub fn claim(&self, name: &str) -> Option<&Claim> {
        self.claims.iter().find(|c| c.name == name)
    }

    pub fn claims_match_digests(&self) -> bool {
        self.claims.len() == self.envelope.claim_digests.len()
            && self.claims.iter().zip(&self.envelope.claim_digests).all(|(c, d)| c.digest() == *d)
    }

    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        codec::to_canonical_vec(self)
    }
}

/// One source credential inside a presentation: its envelope and the
/// claims the holder chose to reveal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisclosedCredential {
    pub envelope: CredentialEnvelope,
    pub claims: Vec<Claim>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiablePresentation {
    pub vp_id: VpId,
    pub holder_did: Did,
    pub disclosed: Vec<DisclosedCredential>,
    pub nonrev: Vec<NonRevocationProof>,
    pub audience_did: Did,
    pub expires_at: Option<Timestamp>,
    pub holder_signature: Signature,
}

#[derive(Serialize)]
struct PresentationBody<'a> {
    vp_id: &'a VpId,
    holder_did: &'a Did,
    disclosed: &'a [DisclosedCredential],
    nonrev: &'a [NonRevocationProof],
    audience_did: &'a Did,
    expires_at: Option<Timestamp>,
}

impl VerifiablePresentation {
    pub fn signing_bytes(&self) -> Vec<u8> {
        codec::to_canonical_vec(&PresentationBody {
            vp_id: &self.vp_id,
            holder_did: &self.holder_did,
            disclosed: &self.disclosed,
            nonrev: &self.nonrev,
            audience_did: &self.audience_did,
            expires_at: self.expires_at,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::to_canonical_vec(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        codec::from_json_slice(bytes)
    }

    pub fn disclosed_claims(&self) -> impl Iterator<Item = &Claim> {
        self.disclosed.iter().flat_map(|d| d.claims.iter())
    }
}

/// Outcome of a credential or presentation check. Fields that do not apply
/// to a bare credential stay `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub signature_ok: bool,
    pub issuer_known: bool,
    pub not_revoked: Option<bool>,
    pub holder_signature_ok: Option<bool>,
    pub disclosure_ok: Option<bool>,
    pub audience_ok: Option<bool>,
    pub expired: Option<bool>,
}

impl VerificationReport {
    pub fn is_valid(&self) -> bool {
        self.signature_ok
            && self.issuer_known
            && self.not_revoked == Some(true)
            && self.holder_signature_ok != Some(false)
            && self.disclosure_ok != Some(false)
            && self.audience_ok != Some(false)
            && self.expired != Some(true)
    }
}

/// Hands out fresh non-revocation proofs on behalf of issuers.
pub trait WitnessSource {
    fn non_revocation_proof(&self, registry_id: &RegistryId, cid: &Cid) -> Option<NonRevocationProof>;
}

impl WitnessSource for RevocationRegistry {
    fn non_revocation_proof(&self, registry_id: &RegistryId, cid: &Cid) -> Option<NonRevocationProof> {
        (registry_id == &self.registry_id).then(|| self.prove_non_revocation(cid).ok()).flatten()
    }
}

impl WitnessSource for WalletStore {
    fn non_revocation_proof(&self, registry_id: &RegistryId, cid: &Cid) -> Option<NonRevocationProof> {
        self.registry().and_then(|r| r.non_revocation_proof(registry_id, cid))
    }
}

impl<W: WitnessSource> WitnessSource for [W] {
    fn non_revocation_proof(&self, registry_id: &RegistryId, cid: &Cid) -> Option<NonRevocationProof> {
        self.iter().find_map(|w| w.non_revocation_proof(registry_id, cid))
    }
}

impl<W: WitnessSource + ?Sized> WitnessSource for &W {
    fn non_revocation_proof(&self, registry_id: &RegistryId, cid: &Cid) -> Option<NonRevocationProof> {
        (**self).non_revocation_proof(registry_id, cid)
    }
}

/// Copies of issuer registries published for proof requests.
#[derive(Default)]
pub struct WitnessDirectory {
    registries: parking_lot::RwLock<BTreeMap<RegistryId, RevocationRegistry>>,
}

impl WitnessDirectory {
    pub fn publish(&self, registry: &RevocationRegistry) {
        self.registries.write().insert(registry.registry_id, registry.clone());
    }
}

impl WitnessSource for WitnessDirectory {
    fn non_revocation_proof(&self, registry_id: &RegistryId, cid: &Cid) -> Option<NonRevocationProof> {
        self.registries.read().get(registry_id).and_then(|r| r.prove_non_revocation(cid).ok())
    }
}

/// What a verifier consults: the ledger for keys and anchored registry
/// states, plus somewhere to obtain witnesses for bare credentials.
#[derive(Clone, Copy)]
pub struct LedgerView<'a> {
    pub ledger: &'a Ledger,
    pub witnesses: &'a dyn WitnessSource,
}

/// Issues a credential from `issuer` to `subject_did`, registers its cid
/// as active and re-anchors the issuer's registry state.
pub fn issue_vc<R: RngCore + CryptoRng + ?Sized>(
    issuer: &mut WalletStore,
    ledger: &Ledger,
    subject_did: &Did,
    claims: &[(&str, &str)],
    now: Timestamp,
    rng: &mut R,
) -> Result<VerifiableCredential, CredentialError> {
    let mut seen = BTreeSet::new();
    for (name, _) in claims {
        if !seen.insert(*name) {
            return Err(CredentialError::DuplicateClaim(name.to_string()));
        }
    }
    let (issuer_did, issuer_key) = issuer.anywise_key().ok_or(CredentialError::UnregisteredIssuer)?;
    let registered = ledger.stored_document(&issuer_did).map(|d| d.verification_key);
    if registered != Some(issuer_key.public_key) {
        return Err(CredentialError::UnregisteredIssuer);
    }
    let identity = issuer.ledger_identity().cloned().ok_or(CredentialError::UnregisteredIssuer)?;

    let claims: Vec<Claim> = claims.iter().map(|(n, v)| Claim::new(n, v, rng)).collect();
    let mut envelope = CredentialEnvelope {
        cid: Cid::random(rng),
        issuer_did,
        issuer_key: issuer_key.public_key,
        subject_did: subject_did.clone(),
        claim_digests: claims.iter().map(Claim::digest).collect(),
        registry_id: RegistryId([0; 16]),
        issued_at: now,
        signature: Signature([0; 64]),
    };

    let registry = issuer.registry_mut().ok_or(CredentialError::RegistryUnavailable)?;
    envelope.registry_id = registry.registry_id;
    envelope.signature = issuer_key.sign(&envelope.signing_bytes()).map_err(|_| CredentialError::Signing)?;
    registry.register_credential(envelope.cid, &issuer_key, &LedgerAnchor { ledger, identity: &identity })?;
    Ok(VerifiableCredential { envelope, claims })
}

fn issuer_registered(envelope: &CredentialEnvelope, ledger: &Ledger) -> bool {
    ledger
        .stored_document(&envelope.issuer_did)
        .is_some_and(|doc| doc.verification_key == envelope.issuer_key)
}

/// Checks `proof` against the latest registry state the issuer anchored.
fn proof_against_ledger(envelope: &CredentialEnvelope, proof: &NonRevocationProof, ledger: &Ledger) -> bool {
    if proof.cid != envelope.cid || proof.registry_id != envelope.registry_id {
        return false;
    }
    match ledger.latest_registry_state(&envelope.issuer_did, &envelope.registry_id) {
        Ok(state) => state.verify_signature(&envelope.issuer_key) && revocation::verify_non_revocation(proof, &state),
        Err(_) => false,
    }
}

pub fn verify_vc(vc: &VerifiableCredential, view: LedgerView<'_>) -> VerificationReport {
    let env = &vc.envelope;
    let signature_ok = env.signature_ok() && vc.claims_match_digests();
    let issuer_known = issuer_registered(env, view.ledger);
    let not_revoked = issuer_known.then(|| {
        view.witnesses
            .non_revocation_proof(&env.registry_id, &env.cid)
            .is_some_and(|p| proof_against_ledger(env, &p, view.ledger))
    });
    VerificationReport { signature_ok, issuer_known, not_revoked, ..Default::default() }
}

/// Builds a presentation of `disclosed_claim_names` drawn from the holder's
/// credentials `cids`, bound to `audience_did` and, with `ttl`, to an
/// expiry time. Proofs come from `witnesses`; a credential the issuer can
/// no longer prove active simply ships without one.
#[allow(clippy::too_many_arguments)]
pub fn create_vp<R: RngCore + CryptoRng + ?Sized>(
    holder: &WalletStore,
    witnesses: &dyn WitnessSource,
    cids: &[Cid],
    disclosed_claim_names: &[&str],
    audience_did: &Did,
    ttl: Option<u64>,
    now: Timestamp,
    rng: &mut R,
) -> Result<VerifiablePresentation, CredentialError> {
    if disclosed_claim_names.is_empty() {
        return Err(CredentialError::EmptyDisclosure);
    }
    let vcs = cids
        .iter()
        .map(|cid| holder.credential(cid).ok_or(CredentialError::UnknownCredential(*cid)))
        .collect::<Result<Vec<_>, _>>()?;
    for name in disclosed_claim_names {
        if !vcs.iter().any(|vc| vc.claim(name).is_some()) {
            return Err(CredentialError::UnknownClaim(name.to_string()));
        }
    }
    let holder_did = match vcs.first() {
        Some(vc) => vc.envelope.subject_did.clone(),
        None => return Err(CredentialError::EmptyDisclosure),
    };
    if vcs.iter().any(|vc| vc.envelope.subject_did != holder_did) {
        return Err(CredentialError::MixedSubjects);
    }
    let holder_key = holder.key_for(&holder_did).ok_or(CredentialError::UnknownCredential(cids[0]))?;

    let disclosed: Vec<DisclosedCredential> = vcs
        .iter()
        .map(|vc| DisclosedCredential {
            envelope: vc.envelope.clone(),
            claims: vc.claims.iter().filter(|c| disclosed_claim_names.contains(&c.name.as_str())).cloned().collect(),
        })
        .filter(|d| !d.claims.is_empty())
        .collect();
    let nonrev = disclosed
        .iter()
        .filter_map(|d| witnesses.non_revocation_proof(&d.envelope.registry_id, &d.envelope.cid))
        .collect();

    let mut vp = VerifiablePresentation {
        vp_id: VpId::random(rng),
        holder_did,
        disclosed,
        nonrev,
        audience_did: audience_did.clone(),
        expires_at: ttl.map(|t| now.plus(t)),
        holder_signature: Signature([0; 64]),
    };
    vp.holder_signature = holder_key.sign(&vp.signing_bytes()).map_err(|_| CredentialError::Signing)?;
    Ok(vp)
}

pub fn verify_vp(
    vp: &VerifiablePresentation,
    ledger: &Ledger,
    expected_audience: &Did,
    now: Timestamp,
) -> VerificationReport {
    let holder_signature_ok = ledger
        .stored_document(&vp.holder_did)
        .is_some_and(|doc| crypto::verify(&doc.verification_key, &vp.signing_bytes(), &vp.holder_signature));

    let nonempty = !vp.disclosed.is_empty();
    let mut signature_ok = nonempty;
    let mut issuer_known = nonempty;
    let mut not_revoked = nonempty;
    let mut disclosure_ok = nonempty;
    for d in &vp.disclosed {
        let env = &d.envelope;
        signature_ok &= env.signature_ok();
        let known = issuer_registered(env, ledger);
        issuer_known &= known;
        disclosure_ok &= env.subject_did == vp.holder_did
            && !d.claims.is_empty()
            && d.claims.iter().all(|c| env.claim_digests.contains(&c.digest()));
        not_revoked &= known
            && vp.nonrev.iter().filter(|p| p.cid == env.cid).any(|p| proof_against_ledger(env, p, ledger));
    }

    VerificationReport {
        signature_ok,
        issuer_known,
        not_revoked: issuer_known.then_some(not_revoked),
        holder_signature_ok: Some(holder_signature_ok),
        disclosure_ok: Some(disclosure_ok),
        audience_ok: Some(&vp.audience_did == expected_audience),
        expired: Some(vp.expires_at.is_some_and(|t| now >= t)),
    }
}
