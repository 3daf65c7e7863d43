use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::mediator::{MediationGrant, Mediator, Notice};
use super::AgentError;
use crate::clock::Timestamp;
use crate::codec;
use crate::credentials::VerifiableCredential;
use crate::crypto::{self, AeadCiphertext, KeyPair, CryptoError};
use crate::identity::{self, Did, DidDocument, DidKind, DidStore, IdentityError};
use crate::ledger::{Authorization, Certificate, Identity};
use crate::revocation::{Cid, RevocationRegistry};

/// Alias under which a wallet keeps its anywise DID.
pub const ANYWISE_ALIAS: &str = "@anywise";

const WALLET_MAGIC: &[u8] = b"SSIW1";
const KDF_SALT: &[u8] = b"ssi/wallet-store/v1";
const KDF_ROUNDS: u32 = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredDid {
    pub did: Did,
    pub doc: DidDocument,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connection {
    pub my_pairwise: Did,
    pub their_pairwise: Did,
    pub their_doc: DidDocument,
    pub authenticated_peer: bool,
    /// Peer's anywise DID, known only once the peer authenticated.
    pub their_anywise: Option<Did>,
    pub send_seq: u64,
    pub last_recv_seq: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct WalletStore {
    pub owner: String,
    keys: BTreeMap<String, KeyPair>,
    dids: BTreeMap<String, StoredDid>,
    connections: BTreeMap<String, Connection>,
    credentials: BTreeMap<Cid, VerifiableCredential>,
    mediator_endpoint: Option<String>,
    grants: Vec<MediationGrant>,
    certificate: Option<Certificate>,
    authorization: Option<Authorization>,
    registry: Option<RevocationRegistry>,
    backup_key: Option<KeyPair>,
    backup_seq: u64,
    /// Contact-side key shares held for other patients, by patient DID.
    #[serde(with = "share_map")]
    held_shares: BTreeMap<String, Vec<u8>>,
    notices: Vec<Notice>,
    /// Whether this wallet's owner answers emergency pings.
    responsive: bool,
    #[serde(skip)]
    store_key: Option<[u8; 32]>,
}

mod share_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(k, v)| (k.as_str(), crate::codec::b58(v)))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Vec<u8>>, D::Error> {
        use serde::de::Error;
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                crate::codec::from_b58(&v).map(|b| (k, b)).ok_or_else(|| D::Error::custom("invalid base58"))
            })
            .collect()
    }
}

fn derive_store_key(passphrase: &str) -> [u8; 32] {
    let mut key = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<sha2::Sha256>(passphrase.as_bytes(), KDF_SALT, KDF_ROUNDS, &mut key);
    key
}

impl WalletStore {
    pub fn new(owner: &str) -> Self {
        WalletStore { owner: owner.to_string(), responsive: true, ..Default::default() }
    }

    // ---- at-rest storage ----

    pub fn set_passphrase(&mut self, passphrase: &str) {
        self.store_key = Some(derive_store_key(passphrase));
    }

    /// `"SSIW1" ‖ nonce ‖ body ‖ tag`, the AEAD over the canonical JSON of
    /// the whole wallet.
    pub fn to_file_bytes<R: RngCore + CryptoRng + ?Sized>(&self, rng: &mut R) -> Result<Vec<u8>, AgentError> {
        let key = self.store_key.ok_or(AgentError::Missing("passphrase"))?;
        let ct = crypto::aead_encrypt(&key, &codec::to_canonical_vec(self), WALLET_MAGIC, rng)?;
        let mut out = WALLET_MAGIC.to_vec();
        out.extend(ct.to_bytes());
        Ok(out)
    }

    pub fn from_file_bytes(bytes: &[u8], passphrase: &str) -> Result<Self, AgentError> {
        let body = bytes
            .strip_prefix(WALLET_MAGIC)
            .ok_or_else(|| AgentError::Malformed("missing wallet magic".into()))?;
        let ct = AeadCiphertext::from_bytes(body)?;
        let key = derive_store_key(passphrase);
        let plain = crypto::aead_decrypt(&key, &ct, WALLET_MAGIC).map_err(|e| match e {
            CryptoError::AuthenticationFailure => AgentError::WrongPassphrase,
            other => AgentError::Crypto(other),
        })?;
        let mut wallet: WalletStore =
            codec::from_json_slice(&plain).map_err(|e| AgentError::Malformed(e.to_string()))?;
        wallet.store_key = Some(key);
        Ok(wallet)
    }

    // ---- DIDs and keys ----

    pub fn import_key(&mut self, did: &Did, key: KeyPair) {
        self.keys.insert(did.to_string(), key);
    }

    pub fn key_for(&self, did: &Did) -> Option<&KeyPair> {
        self.keys.get(&did.to_string())
    }

    pub fn did(&self, alias: &str) -> Option<&StoredDid> {
        self.dids.get(alias)
    }

    pub fn anywise(&self) -> Option<&StoredDid> {
        self.dids.get(ANYWISE_ALIAS)
    }

    pub fn anywise_did(&self) -> Option<&Did> {
        self.anywise().map(|s| &s.did)
    }

    pub fn anywise_key(&self) -> Option<(Did, KeyPair)> {
        let stored = self.anywise()?;
        Some((stored.did.clone(), self.key_for(&stored.did)?.clone()))
    }

    /// Creates the wallet's anywise DID, or returns the existing one.
    pub fn ensure_anywise<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        mediator: &Mediator,
        now: Timestamp,
        rng: &mut R,
    ) -> Result<StoredDid, AgentError> {
        if let Some(existing) = self.anywise() {
            return Ok(existing.clone());
        }
        self.ensure_mediator(mediator);
        let (did, doc) = self.mint(DidKind::Anywise, ANYWISE_ALIAS, mediator, now, rng)?;
        Ok(StoredDid { did, doc })
    }

    fn mint<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        kind: DidKind,
        alias: &str,
        mediator: &Mediator,
        now: Timestamp,
        rng: &mut R,
    ) -> Result<(Did, DidDocument), AgentError> {
        let key = crypto::generate_keypair(rng);
        let (did, doc) = identity::create_did(kind, &key, mediator.endpoint(), now)?;
        let grant = mediator.request_mediation(&self.owner, &did, now)?;
        self.grants.push(grant);
        self.keys.insert(did.to_string(), key);
        self.dids.insert(alias.to_string(), StoredDid { did: did.clone(), doc: doc.clone() });
        Ok((did, doc))
    }

    /// Fresh pairwise DID for one relationship, routed through `mediator`.
    pub fn mint_pairwise<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        alias: &str,
        mediator: &Mediator,
        now: Timestamp,
        rng: &mut R,
    ) -> Result<(Did, DidDocument), IdentityError> {
        if self.alias_in_use(alias) {
            return Err(IdentityError::DuplicateAlias(alias.to_string()));
        }
        self.mint(DidKind::Pairwise, alias, mediator, now, rng).map_err(|e| match e {
            AgentError::Identity(inner) => inner,
            _ => IdentityError::NoMediatorGrant,
        })
    }

    pub fn alias_in_use(&self, alias: &str) -> bool {
        alias == ANYWISE_ALIAS || self.dids.contains_key(alias) || self.connections.contains_key(alias)
    }

    pub fn alias_of(&self, did: &Did) -> Option<&str> {
        self.dids.iter().find(|(_, s)| &s.did == did).map(|(a, _)| a.as_str())
    }

    // ---- mediator ----

    /// Registers an account with `mediator` on first use.
    pub fn ensure_mediator(&mut self, mediator: &Mediator) {
        if self.mediator_endpoint.is_none() {
            mediator.register_account(&self.owner);
            self.mediator_endpoint = Some(mediator.endpoint().to_string());
        }
    }

    pub fn has_mediator_grant(&self) -> bool {
        !self.grants.is_empty()
    }

    pub fn grants(&self) -> &[MediationGrant] {
        &self.grants
    }

    // ---- connections ----

    pub fn connection(&self, alias: &str) -> Option<&Connection> {
        self.connections.get(alias)
    }

    pub fn connection_mut(&mut self, alias: &str) -> Option<&mut Connection> {
        self.connections.get_mut(alias)
    }

    pub fn connections(&self) -> &BTreeMap<String, Connection> {
        &self.connections
    }

    pub fn insert_connection(&mut self, alias: &str, conn: Connection) {
        self.connections.insert(alias.to_string(), conn);
    }

    /// Drops a connection together with its pairwise DID and key.
    pub fn remove_connection(&mut self, alias: &str) -> Option<Connection> {
        let conn = self.connections.remove(alias)?;
        self.dids.remove(alias);
        self.keys.remove(&conn.my_pairwise.to_string());
        Some(conn)
    }

    /// Forgets the connection state but keeps our pairwise DID.
    pub(crate) fn remove_connection_only(&mut self, alias: &str) {
        self.connections.remove(alias);
    }

    /// Document of one of our own DIDs.
    pub fn stored_document_of(&self, did: &Did) -> Option<DidDocument> {
        self.dids.values().find(|s| &s.did == did).map(|s| s.doc.clone())
    }

    /// Alias of the connection whose pairwise DIDs are `(mine, theirs)`.
    pub fn connection_alias_for(&self, mine: &Did, theirs: &Did) -> Option<String> {
        self.connections
            .iter()
            .find(|(_, c)| &c.my_pairwise == mine && &c.their_pairwise == theirs)
            .map(|(a, _)| a.clone())
    }

    /// Alias of the connection whose remote side is one of `peer`'s DIDs.
    pub fn connection_with(&self, peer: &WalletStore) -> Option<String> {
        self.connections
            .iter()
            .find(|(_, c)| peer.key_for(&c.their_pairwise).is_some())
            .map(|(a, _)| a.clone())
    }

    // ---- credentials ----

    pub fn store_credential(&mut self, vc: VerifiableCredential) {
        self.credentials.insert(vc.cid(), vc);
    }

    pub fn credential(&self, cid: &Cid) -> Option<&VerifiableCredential> {
        self.credentials.get(cid)
    }

    pub fn credentials(&self) -> &BTreeMap<Cid, VerifiableCredential> {
        &self.credentials
    }

    /// Credentials holding every claim in `names` first, then any holding at
    /// least one, newest issuance first within each group.
    pub fn credentials_with_claims(&self, names: &[&str]) -> Vec<Cid> {
        let mut hits: Vec<&VerifiableCredential> = self
            .credentials
            .values()
            .filter(|vc| names.iter().any(|n| vc.claim(n).is_some()))
            .collect();
        hits.sort_by_key(|vc| std::cmp::Reverse(vc.envelope.issued_at));
        let mut cids = Vec::new();
        let mut covered: Vec<&str> = Vec::new();
        for vc in hits {
            let adds: Vec<&str> =
                names.iter().copied().filter(|n| !covered.contains(n) && vc.claim(n).is_some()).collect();
            if !adds.is_empty() {
                covered.extend(adds);
                cids.push(vc.cid());
            }
        }
        cids
    }

    // ---- ledger membership ----

    pub fn set_membership(&mut self, cert: Certificate, auth: Authorization) {
        self.certificate = Some(cert);
        self.authorization = Some(auth);
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        self.certificate.as_ref()
    }

    pub fn authorization(&self) -> Option<&Authorization> {
        self.authorization.as_ref()
    }

    pub fn ledger_identity(&self) -> Option<&Identity> {
        self.authorization.as_ref().map(|a| &a.identity)
    }

    pub fn registry(&self) -> Option<&RevocationRegistry> {
        self.registry.as_ref()
    }

    pub fn registry_mut(&mut self) -> Option<&mut RevocationRegistry> {
        self.registry.as_mut()
    }

    pub fn set_registry(&mut self, registry: RevocationRegistry) {
        self.registry = Some(registry);
    }

    // ---- recovery material ----

    pub fn backup_key(&self) -> Option<&KeyPair> {
        self.backup_key.as_ref()
    }

    pub fn set_backup_key(&mut self, key: KeyPair) {
        self.backup_key = Some(key);
    }

    pub fn backup_seq(&self) -> u64 {
        self.backup_seq
    }

    pub(crate) fn set_backup_seq(&mut self, seq: u64) {
        self.backup_seq = seq;
    }

    pub fn hold_share(&mut self, patient: &Did, share: Vec<u8>) {
        self.held_shares.insert(patient.to_string(), share);
    }

    pub fn held_share(&self, patient: &Did) -> Option<&[u8]> {
        self.held_shares.get(&patient.to_string()).map(Vec::as_slice)
    }

    pub fn set_responsive(&mut self, responsive: bool) {
        self.responsive = responsive;
    }

    pub fn is_responsive(&self) -> bool {
        self.responsive
    }

    pub fn push_notice(&mut self, notice: Notice) {
        self.notices.push(notice);
    }

    pub fn notices(&self) -> &[Notice] {
        &self.notices
    }

    // ---- backup support ----

    pub(crate) fn backup_parts(&self) -> super::BackupPayload {
        let anywise = self.anywise().cloned();
        super::BackupPayload {
            owner: self.owner.clone(),
            anywise_key: anywise.as_ref().and_then(|a| self.key_for(&a.did).cloned()),
            anywise,
            credentials: self.credentials.values().cloned().collect(),
            mediator_endpoint: self.mediator_endpoint.clone(),
            grants: self
                .grants
                .iter()
                .filter(|g| g.recipient_did.is_anywise())
                .cloned()
                .collect(),
            certificate: self.certificate.clone(),
            authorization: self.authorization.clone(),
            registry: self.registry.clone(),
            held_shares: self.held_shares.iter().map(|(k, v)| (k.clone(), codec::b58(v))).collect(),
        }
    }

    pub(crate) fn from_backup(payload: super::BackupPayload) -> Result<Self, AgentError> {
        let mut wallet = WalletStore::new(&payload.owner);
        if let (Some(stored), Some(key)) = (payload.anywise, payload.anywise_key) {
            wallet.keys.insert(stored.did.to_string(), key);
            wallet.dids.insert(ANYWISE_ALIAS.to_string(), stored);
        }
        wallet.credentials = payload.credentials.into_iter().map(|vc| (vc.cid(), vc)).collect();
        wallet.mediator_endpoint = payload.mediator_endpoint;
        wallet.grants = payload.grants;
        wallet.certificate = payload.certificate;
        wallet.authorization = payload.authorization;
        wallet.registry = payload.registry;
        for (k, v) in payload.held_shares {
            let bytes = codec::from_b58(&v).ok_or_else(|| AgentError::Malformed("held share".into()))?;
            wallet.held_shares.insert(k, bytes);
        }
        Ok(wallet)
    }
}

impl DidStore for WalletStore {
    fn stored_document(&self, did: &Did) -> Option<DidDocument> {
        self.dids
            .values()
            .find(|s| &s.did == did)
            .map(|s| s.doc.clone())
            .or_else(|| self.connections.values().find(|c| &c.their_pairwise == did).map(|c| c.their_doc.clone()))
    }
}
