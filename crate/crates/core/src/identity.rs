//! Peer-style DIDs whose identifier is the base58 SHA-256 of the canonical
//! genesis document, plus the out-of-band invitation carried in a QR code.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::agents::{Mediator, WalletStore};
use crate::clock::Timestamp;
use crate::codec::{self, b58_bytes};
use crate::crypto::{self, KeyPair, PublicKey, Scheme};

pub const DID_METHOD: &str = "peer";

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
pub enum IdentityError {
    #[error("DID not found: {0}")]
    NotFound(String),
    #[error("stored document does not hash to {0}")]
    IntegrityMismatch(String),
    #[error("missing mediator endpoint")]
    MissingMediatorEndpoint,
    #[error("key pair is not a signing key")]
    WrongKeyScheme,
    #[error("duplicate alias {0:?}")]
    DuplicateAlias(String),
    #[error("malformed invitation: {0}")]
    MalformedInvitation(String),
    #[error("wallet has no mediator grant")]
    NoMediatorGrant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DidKind {
    Anywise,
    Pairwise,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Did {
    pub method: String,
    pub id: String,
    pub kind: DidKind,
}

impl Did {
    pub fn is_anywise(&self) -> bool {
        self.kind == DidKind::Anywise
    }
}

impl std::fmt::Display for Did {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "did:{}:{}", self.method, self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DidDocument {
    pub did: Did,
    pub verification_key: PublicKey,
    pub mediator_endpoint: String,
    pub created_at: Timestamp,
}

/// The hashed part of a document: everything except the DID it yields.
#[derive(Serialize)]
struct Genesis<'a> {
    kind: DidKind,
    verification_key: &'a PublicKey,
    mediator_endpoint: &'a str,
    created_at: Timestamp,
}

pub fn derive_did(
    kind: DidKind,
    verification_key: &PublicKey,
    mediator_endpoint: &str,
    created_at: Timestamp,
) -> Did {
    let genesis = Genesis { kind, verification_key, mediator_endpoint, created_at };
    let digest = crypto::hash(&codec::to_canonical_vec(&genesis));
    Did { method: DID_METHOD.to_string(), id: digest.to_b58(), kind }
}

impl DidDocument {
    /// Recomputes the identifier from the document body.
    pub fn derived_did(&self) -> Did {
        derive_did(self.did.kind, &self.verification_key, &self.mediator_endpoint, self.created_at)
    }

    pub fn is_consistent(&self) -> bool {
        self.derived_did() == self.did
    }

    /// Checks that this document is the genesis document of `did`.
    pub fn check_binding(&self, did: &Did) -> Result<(), IdentityError> {
        if &self.did == did && self.is_consistent() {
            Ok(())
        } else {
            Err(IdentityError::IntegrityMismatch(did.to_string()))
        }
    }
}

pub fn create_did(
    kind: DidKind,
    keypair: &KeyPair,
    mediator_endpoint: &str,
    now: Timestamp,
) -> Result<(Did, DidDocument), IdentityError> {
    if mediator_endpoint.is_empty() {
        return Err(IdentityError::MissingMediatorEndpoint);
    }
    if keypair.scheme_id != Scheme::Ed25519 {
        return Err(IdentityError::WrongKeyScheme);
    }
    let did = derive_did(kind, &keypair.public_key, mediator_endpoint, now);
    let doc = DidDocument {
        did: did.clone(),
        verification_key: keypair.public_key,
        mediator_endpoint: mediator_endpoint.to_string(),
        created_at: now,
    };
    Ok((did, doc))
}

/// Anything that can hand back a stored DID document.
pub trait DidStore {
    fn stored_document(&self, did: &Did) -> Option<DidDocument>;
}

/// Where a DID is looked up: the wallet's own records and connections, or
/// the ledger's DID registry (anywise only).
pub enum DidSource<'a> {
    WalletLocal(&'a WalletStore),
    Ledger(&'a crate::ledger::Ledger),
}

pub fn resolve_did(did: &Did, source: DidSource<'_>) -> Result<DidDocument, IdentityError> {
    let stored = match source {
        DidSource::WalletLocal(wallet) => wallet.stored_document(did),
        DidSource::Ledger(ledger) => ledger.stored_document(did),
    };
    let doc = stored.ok_or_else(|| IdentityError::NotFound(did.to_string()))?;
    doc.check_binding(did)?;
    Ok(doc)
}

b58_bytes!(InviteNonce, 16);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OobInvitation {
    pub inviter_pairwise_did: Did,
    pub inviter_doc: DidDocument,
    pub alias: String,
    pub nonce: InviteNonce,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InvitationWire {
    v: u32,
    did: Did,
    doc: DidDocument,
    alias: String,
    nonce_b58: InviteNonce,
}

impl OobInvitation {
    /// The QR payload: canonical JSON `{alias, did, doc, nonce_b58, v}`.
    pub fn to_bytes(&self) -> Vec<u8> {
        codec::to_canonical_vec(&InvitationWire {
            v: 1,
            did: self.inviter_pairwise_did.clone(),
            doc: self.inviter_doc.clone(),
            alias: self.alias.clone(),
            nonce_b58: self.nonce,
        })
    }
}

pub fn parse_invitation(bytes: &[u8]) -> Result<OobInvitation, IdentityError> {
    let wire: InvitationWire = codec::from_json_slice(bytes)
        .map_err(|e| IdentityError::MalformedInvitation(e.to_string()))?;
    if wire.v != 1 {
        return Err(IdentityError::MalformedInvitation(format!("unsupported version {}", wire.v)));
    }
    if wire.did.kind != DidKind::Pairwise {
        return Err(IdentityError::MalformedInvitation("inviter DID must be pairwise".into()));
    }
    wire.doc.check_binding(&wire.did)?;
    Ok(OobInvitation {
        inviter_pairwise_did: wire.did,
        inviter_doc: wire.doc,
        alias: wire.alias,
        nonce: wire.nonce_b58,
    })
}

/// Mints a pairwise DID under `alias`, asks the mediator to route it, and
/// returns the invitation to display as a QR code.
pub fn make_invitation<R: RngCore + CryptoRng + ?Sized>(
    wallet: &mut WalletStore,
    mediator: &Mediator,
    alias: &str,
    now: Timestamp,
    rng: &mut R,
) -> Result<OobInvitation, IdentityError> {
    if !wallet.has_mediator_grant() {
        return Err(IdentityError::NoMediatorGrant);
    }
    if wallet.alias_in_use(alias) {
        return Err(IdentityError::DuplicateAlias(alias.to_string()));
    }
    let (did, doc) = wallet.mint_pairwise(alias, mediator, now, rng)?;
    Ok(OobInvitation {
        inviter_pairwise_did: did,
        inviter_doc: doc,
        alias: alias.to_string(),
        nonce: InviteNonce::random(rng),
    })
}
