//! Single-node simulation of the permissioned ledger.
//!
//! Each channel is an append-only transaction log plus the key/value state
//! obtained by applying it; every transaction is its own block. Channel
//! access is decided by one role table ([`permits`]), and keys on
//! owner-scoped channels carry the owner's DID as their second segment.

mod authority;

use std::collections::BTreeMap;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

pub use authority::{
    Authorization, AuthorityError, Certificate, CertificateAuthority, CertificateRequest, Identity,
    Msp, MspCustody, Principal, Role, DEFAULT_CERT_VALIDITY,
};

use crate::clock::{SimClock, Timestamp};
use crate::codec::{self, b58_vec};
use crate::crypto::{self, Digest};
use crate::identity::{Did, DidDocument, DidStore};
use crate::revocation::{RegistryId, RegistryState, StateAnchor};

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("{principal:?} may not {access:?} channel {channel}")]
    UnauthorizedChannel { principal: Principal, channel: ChannelId, access: Access },
    #[error("key {0:?} is owned by another identity")]
    NotOwner(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("DID already registered: {0}")]
    DuplicateDid(String),
    #[error("pairwise DIDs are never written to the ledger")]
    PairwiseDidRejected,
    #[error("document does not hash to its DID")]
    IntegrityMismatch,
    #[error("backup sequence {got} is not above {last}")]
    NonMonotoneSequence { last: u64, got: u64 },
    #[error("registry epoch {got} does not follow {expected}")]
    EpochGap { expected: u64, got: u64 },
    #[error("registry state not signed by the submitting issuer")]
    WrongIssuer,
    #[error("only the MSP may do this")]
    Unauthorized,
    #[error("malformed ledger data: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelId {
    Dids,
    Backups,
    Registries,
    Security,
}

impl ChannelId {
    pub const ALL: [ChannelId; 4] =
        [ChannelId::Dids, ChannelId::Backups, ChannelId::Registries, ChannelId::Security];

    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelId::Dids => "dids",
            ChannelId::Backups => "backups",
            ChannelId::Registries => "registries",
            ChannelId::Security => "security",
        }
    }

    /// Channels whose keys are scoped to the writer's DID.
    fn owner_scoped(&self) -> bool {
        !matches!(self, ChannelId::Security)
    }
}

impl std::fmt::Display for ChannelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Access {
    Read,
    Write,
}

/// The role to channel table.
///
/// | channel    | read                 | write                          |
/// |------------|----------------------|--------------------------------|
/// | dids       | every role, MSP      | every role (own key)           |
/// | backups    | MSP                  | Patient (own key)              |
/// | registries | every role, MSP      | Practitioner, Laboratory (own) |
/// | security   | Admin                | MSP                            |
pub fn permits(principal: Principal, channel: ChannelId, access: Access) -> bool {
    use Principal::{Member, Msp};
    match (channel, access) {
        (ChannelId::Dids, Access::Read) => true,
        (ChannelId::Dids, Access::Write) => matches!(principal, Member(_)),
        (ChannelId::Backups, Access::Read) => principal == Msp,
        (ChannelId::Backups, Access::Write) => principal == Member(Role::Patient),
        (ChannelId::Registries, Access::Read) => true,
        (ChannelId::Registries, Access::Write) => {
            matches!(principal, Member(Role::Practitioner) | Member(Role::Laboratory))
        }
        (ChannelId::Security, Access::Read) => principal == Member(Role::Admin),
        (ChannelId::Security, Access::Write) => principal == Msp,
    }
}

/// Channels on which `principal` has any access, in table order.
pub fn channels_for(principal: Principal) -> Vec<ChannelId> {
    ChannelId::ALL
        .into_iter()
        .filter(|c| permits(principal, *c, Access::Read) || permits(principal, *c, Access::Write))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub tx_id: Digest,
    pub submitter: String,
    pub channel_id: ChannelId,
    pub op_name: String,
    #[serde(with = "b58_vec")]
    pub payload: Vec<u8>,
    pub block_height: u64,
    pub timestamp: Timestamp,
}

/// Every transaction writes one key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxPayload {
    pub key: String,
    #[serde(with = "b58_vec")]
    pub value: Vec<u8>,
}

#[derive(Default)]
struct ChannelInner {
    state: BTreeMap<String, Vec<u8>>,
    tx_log: Vec<Transaction>,
}

pub struct Channel {
    id: ChannelId,
    inner: RwLock<ChannelInner>,
}

fn replay(log: &[Transaction]) -> Result<BTreeMap<String, Vec<u8>>, LedgerError> {
    let mut state = BTreeMap::new();
    for tx in log {
        let payload: TxPayload = codec::from_json_slice(&tx.payload)
            .map_err(|e| LedgerError::Malformed(e.to_string()))?;
        state.insert(payload.key, payload.value);
    }
    Ok(state)
}

#[derive(Serialize)]
struct TxIdInput<'a> {
    channel: ChannelId,
    height: u64,
    op: &'a str,
    payload: Digest,
    submitter: &'a str,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackupAnchor {
    pub sequence_no: u64,
    pub digest: Digest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmergencyOutcome {
    KeyReleased,
    ContactListReleased,
    Denied,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyRecord {
    pub patient_did: Option<Did>,
    pub requester_did: Did,
    pub msp_id: String,
    pub contact_ack: Option<Did>,
    pub triggered_at: Timestamp,
    pub outcome: EmergencyOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSnapshot {
    pub channel_id: ChannelId,
    pub tx_log: Vec<Transaction>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub channels: Vec<ChannelSnapshot>,
}

pub struct Ledger {
    clock: SimClock,
    channels: BTreeMap<ChannelId, Channel>,
}

fn did_key(did: &Did) -> String {
    format!("did/{did}")
}

fn backup_prefix(patient: &Did) -> String {
    format!("backup/{patient}/")
}

fn registry_prefix(issuer: &Did, registry_id: &RegistryId) -> String {
    format!("registry/{issuer}/{registry_id}/")
}

fn decode<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, LedgerError> {
    codec::from_json_slice(bytes).map_err(|e| LedgerError::Malformed(e.to_string()))
}

impl Ledger {
    pub fn new(clock: SimClock) -> Self {
        let channels = ChannelId::ALL
            .into_iter()
            .map(|id| (id, Channel { id, inner: RwLock::new(ChannelInner::default()) }))
            .collect();
        Ledger { clock, channels }
    }

    fn channel(&self, id: ChannelId) -> &Channel {
        &self.channels[&id]
    }

    fn check_owner(identity: &Identity, channel: ChannelId, key: &str) -> Result<(), LedgerError> {
        if !channel.owner_scoped() {
            return Ok(());
        }
        let owner = key.split('/').nth(1);
        match (identity.did(), owner) {
            (Some(did), Some(owner)) if did.to_string() == owner => Ok(()),
            _ => Err(LedgerError::NotOwner(key.to_string())),
        }
    }

    /// Appends one write to `channel_id`. The role check and the append
    /// happen under the channel's write lock.
    pub fn submit_tx(
        &self,
        identity: &Identity,
        channel_id: ChannelId,
        op_name: &str,
        key: &str,
        value: Vec<u8>,
    ) -> Result<Transaction, LedgerError> {
        self.submit_checked(identity, channel_id, op_name, key, value, |_| Ok(()))
    }

    /// Like [`submit_tx`](Self::submit_tx), running `check` against the
    /// channel state under the same lock so check-then-write is atomic.
    fn submit_checked(
        &self,
        identity: &Identity,
        channel_id: ChannelId,
        op_name: &str,
        key: &str,
        value: Vec<u8>,
        check: impl FnOnce(&BTreeMap<String, Vec<u8>>) -> Result<(), LedgerError>,
    ) -> Result<Transaction, LedgerError> {
        if !permits(identity.principal(), channel_id, Access::Write) {
            return Err(LedgerError::UnauthorizedChannel {
                principal: identity.principal(),
                channel: channel_id,
                access: Access::Write,
            });
        }
        Self::check_owner(identity, channel_id, key)?;

        let channel = self.channel(channel_id);
        let mut inner = channel.inner.write();
        check(&inner.state)?;
        let payload = codec::to_canonical_vec(&TxPayload { key: key.to_string(), value: value.clone() });
        let height = inner.tx_log.len() as u64;
        let submitter = identity.label();
        let tx_id = crypto::hash(&codec::to_canonical_vec(&TxIdInput {
            channel: channel.id,
            height,
            op: op_name,
            payload: crypto::hash(&payload),
            submitter: &submitter,
        }));
        let tx = Transaction {
            tx_id,
            submitter,
            channel_id,
            op_name: op_name.to_string(),
            payload,
            block_height: height,
            timestamp: self.clock.now(),
        };
        inner.state.insert(key.to_string(), value);
        inner.tx_log.push(tx.clone());
        Ok(tx)
    }

    pub fn query(&self, reader: &Identity, channel_id: ChannelId, key: &str) -> Result<Vec<u8>, LedgerError> {
        if !permits(reader.principal(), channel_id, Access::Read) {
            return Err(LedgerError::UnauthorizedChannel {
                principal: reader.principal(),
                channel: channel_id,
                access: Access::Read,
            });
        }
        self.read_committed(channel_id, key)
    }

    fn read_committed(&self, channel_id: ChannelId, key: &str) -> Result<Vec<u8>, LedgerError> {
        self.channel(channel_id)
            .inner
            .read()
            .state
            .get(key)
            .cloned()
            .ok_or_else(|| LedgerError::UnknownKey(key.to_string()))
    }

    fn last_under(&self, channel_id: ChannelId, prefix: &str) -> Option<(String, Vec<u8>)> {
        let inner = self.channel(channel_id).inner.read();
        inner
            .state
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .last()
            .map(|(k, v)| (k.clone(), v.clone()))
    }

    pub fn put_did(&self, identity: &Identity, doc: &DidDocument) -> Result<Transaction, LedgerError> {
        if !doc.did.is_anywise() {
            return Err(LedgerError::PairwiseDidRejected);
        }
        if !doc.is_consistent() {
            return Err(LedgerError::IntegrityMismatch);
        }
        let key = did_key(&doc.did);
        self.submit_checked(identity, ChannelId::Dids, "put_did", &key, codec::to_canonical_vec(doc), |state| {
            if state.contains_key(&key) {
                Err(LedgerError::DuplicateDid(doc.did.to_string()))
            } else {
                Ok(())
            }
        })
    }

    /// Registered document for `did`, re-checked against its identifier.
    pub fn get_did(&self, did: &Did) -> Result<DidDocument, LedgerError> {
        let doc: DidDocument = decode(&self.read_committed(ChannelId::Dids, &did_key(did))?)?;
        doc.check_binding(did).map_err(|_| LedgerError::IntegrityMismatch)?;
        Ok(doc)
    }

    pub fn anchor_backup_hash(
        &self,
        identity: &Identity,
        backup_digest: Digest,
        sequence_no: u64,
    ) -> Result<Transaction, LedgerError> {
        let patient = identity.did().ok_or(LedgerError::Unauthorized)?;
        let prefix = backup_prefix(patient);
        let key = format!("{prefix}{sequence_no:020}");
        let value = codec::to_canonical_vec(&BackupAnchor { sequence_no, digest: backup_digest });
        self.submit_checked(identity, ChannelId::Backups, "anchor_backup_hash", &key, value, |state| {
            let last = state
                .range(prefix.clone()..)
                .take_while(|(k, _)| k.starts_with(&prefix))
                .last()
                .map(|(_, v)| decode::<BackupAnchor>(v))
                .transpose()?;
            match last {
                Some(a) if a.sequence_no >= sequence_no => {
                    Err(LedgerError::NonMonotoneSequence { last: a.sequence_no, got: sequence_no })
                }
                _ => Ok(()),
            }
        })
    }

    pub fn backup_anchor(&self, reader: &Identity, patient: &Did, sequence_no: u64) -> Result<BackupAnchor, LedgerError> {
        let key = format!("{}{sequence_no:020}", backup_prefix(patient));
        decode(&self.query(reader, ChannelId::Backups, &key)?)
    }

    pub fn latest_backup_anchor(&self, reader: &Identity, patient: &Did) -> Result<Option<BackupAnchor>, LedgerError> {
        if !permits(reader.principal(), ChannelId::Backups, Access::Read) {
            return Err(LedgerError::UnauthorizedChannel {
                principal: reader.principal(),
                channel: ChannelId::Backups,
                access: Access::Read,
            });
        }
        self.last_under(ChannelId::Backups, &backup_prefix(patient))
            .map(|(_, v)| decode(&v))
            .transpose()
    }

    pub fn anchor_registry_state(&self, identity: &Identity, state: &RegistryState) -> Result<Transaction, LedgerError> {
        if identity.did() != Some(&state.issuer_did) {
            return Err(LedgerError::WrongIssuer);
        }
        let issuer_doc = self.get_did(&state.issuer_did)?;
        if !state.verify_signature(&issuer_doc.verification_key) {
            return Err(LedgerError::WrongIssuer);
        }
        let prefix = registry_prefix(&state.issuer_did, &state.registry_id);
        let key = format!("{prefix}{:020}", state.epoch);
        let value = codec::to_canonical_vec(state);
        self.submit_checked(identity, ChannelId::Registries, "anchor_registry_state", &key, value, |st| {
            let last = st
                .range(prefix.clone()..)
                .take_while(|(k, _)| k.starts_with(&prefix))
                .last()
                .map(|(_, v)| decode::<RegistryState>(v))
                .transpose()?;
            let expected = last.map_or(0, |s| s.epoch + 1);
            if state.epoch == expected {
                Ok(())
            } else {
                Err(LedgerError::EpochGap { expected, got: state.epoch })
            }
        })
    }

    pub fn registry_state(&self, issuer: &Did, registry_id: &RegistryId, epoch: u64) -> Result<RegistryState, LedgerError> {
        let key = format!("{}{epoch:020}", registry_prefix(issuer, registry_id));
        decode(&self.read_committed(ChannelId::Registries, &key)?)
    }

    pub fn latest_registry_state(&self, issuer: &Did, registry_id: &RegistryId) -> Result<RegistryState, LedgerError> {
        let prefix = registry_prefix(issuer, registry_id);
        let (_, v) = self
            .last_under(ChannelId::Registries, &prefix)
            .ok_or(LedgerError::UnknownKey(prefix))?;
        decode(&v)
    }

    pub fn record_emergency_access(&self, identity: &Identity, rec: &EmergencyRecord) -> Result<Transaction, LedgerError> {
        if identity.principal() != Principal::Msp {
            return Err(LedgerError::Unauthorized);
        }
        let index = self.channel(ChannelId::Security).inner.read().tx_log.len();
        let key = format!("emergency/{index:020}");
        self.submit_tx(identity, ChannelId::Security, "record_emergency_access", &key, codec::to_canonical_vec(rec))
    }

    /// Security-channel audit trail in trigger order.
    pub fn emergency_records(&self, reader: &Identity) -> Result<Vec<EmergencyRecord>, LedgerError> {
        if !permits(reader.principal(), ChannelId::Security, Access::Read) {
            return Err(LedgerError::UnauthorizedChannel {
                principal: reader.principal(),
                channel: ChannelId::Security,
                access: Access::Read,
            });
        }
        let inner = self.channel(ChannelId::Security).inner.read();
        inner.state.values().map(|v| decode(v)).collect()
    }

    pub fn tx_count(&self, channel_id: ChannelId) -> usize {
        self.channel(channel_id).inner.read().tx_log.len()
    }

    /// Rebuilds every channel's state from its log and compares it with the
    /// live state.
    pub fn verify_replay(&self) -> Result<bool, LedgerError> {
        for channel in self.channels.values() {
            let inner = channel.inner.read();
            if replay(&inner.tx_log)? != inner.state {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Digest over the canonical form of all channel states.
    pub fn state_digest(&self) -> Digest {
        let states: BTreeMap<&str, BTreeMap<String, String>> = self
            .channels
            .values()
            .map(|c| {
                let inner = c.inner.read();
                let st = inner.state.iter().map(|(k, v)| (k.clone(), codec::b58(v))).collect();
                (c.id.as_str(), st)
            })
            .collect();
        crypto::hash(&codec::to_canonical_vec(&states))
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            channels: self
                .channels
                .values()
                .map(|c| ChannelSnapshot { channel_id: c.id, tx_log: c.inner.read().tx_log.clone() })
                .collect(),
        }
    }

    pub fn export_json(&self) -> Vec<u8> {
        codec::to_canonical_vec(&self.snapshot())
    }

    /// Restores a ledger by replaying each exported log.
    pub fn import_json(bytes: &[u8], clock: SimClock) -> Result<Ledger, LedgerError> {
        let snapshot: LedgerSnapshot = decode(bytes)?;
        let ledger = Ledger::new(clock);
        for ch in snapshot.channels {
            let state = replay(&ch.tx_log)?;
            let mut inner = ledger.channel(ch.channel_id).inner.write();
            inner.state = state;
            inner.tx_log = ch.tx_log;
        }
        Ok(ledger)
    }
}

impl DidStore for Ledger {
    fn stored_document(&self, did: &Did) -> Option<DidDocument> {
        if !did.is_anywise() {
            return None;
        }
        self.read_committed(ChannelId::Dids, &did_key(did)).ok().and_then(|v| decode(&v).ok())
    }
}

/// Publishes registry states through an issuer's ledger identity.
pub struct LedgerAnchor<'a> {
    pub ledger: &'a Ledger,
    pub identity: &'a Identity,
}

impl StateAnchor for LedgerAnchor<'_> {
    fn anchor(&self, state: &RegistryState) -> Result<(), String> {
        self.ledger.anchor_registry_state(self.identity, state).map(|_| ()).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::identity::{create_did, DidKind};
    use crate::revocation::{init_registry, Cid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn member(rng: &mut ChaCha20Rng, role: Role) -> (KeyPair, DidDocument, Identity) {
        let key = crypto::generate_keypair(rng);
        let (did, doc) = create_did(DidKind::Anywise, &key, "m", Timestamp(0)).unwrap();
        (key, doc, Identity::for_tests(Some(did), Principal::Member(role)))
    }

    #[test]
    fn put_get_did_roundtrip_and_duplicates() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ledger = Ledger::new(SimClock::new(0));
        let (_, doc, id) = member(&mut rng, Role::Patient);
        ledger.put_did(&id, &doc).unwrap();
        assert_eq!(ledger.get_did(&doc.did).unwrap(), doc);
        assert_eq!(ledger.put_did(&id, &doc), Err(LedgerError::DuplicateDid(doc.did.to_string())));
    }

    #[test]
    fn pairwise_dids_are_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ledger = Ledger::new(SimClock::new(0));
        let key = crypto::generate_keypair(&mut rng);
        let (did, doc) = create_did(DidKind::Pairwise, &key, "m", Timestamp(0)).unwrap();
        let id = Identity::for_tests(Some(did.clone()), Principal::Member(Role::Patient));
        assert_eq!(ledger.put_did(&id, &doc), Err(LedgerError::PairwiseDidRejected));
        assert!(ledger.stored_document(&did).is_none());
    }

    #[test]
    fn writing_someone_elses_did_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ledger = Ledger::new(SimClock::new(0));
        let (_, doc_a, _) = member(&mut rng, Role::Patient);
        let (_, _, id_b) = member(&mut rng, Role::Patient);
        assert!(matches!(ledger.put_did(&id_b, &doc_a), Err(LedgerError::NotOwner(_))));
    }

    #[test]
    fn generic_write_then_query() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let ledger = Ledger::new(SimClock::new(0));
        let (_, doc, id) = member(&mut rng, Role::Laboratory);
        let key = format!("note/{}/x", doc.did);
        let tx = ledger.submit_tx(&id, ChannelId::Registries, "note", &key, b"v1".to_vec()).unwrap();
        assert_eq!(tx.block_height, 0);
        assert_eq!(ledger.query(&id, ChannelId::Registries, &key).unwrap(), b"v1");
        assert_eq!(
            ledger.query(&id, ChannelId::Registries, "nope"),
            Err(LedgerError::UnknownKey("nope".into()))
        );
        assert!(matches!(
            ledger.submit_tx(&id, ChannelId::Security, "x", "emergency/1", vec![]),
            Err(LedgerError::UnauthorizedChannel { .. })
        ));
    }

    #[test]
    fn backup_sequence_must_increase() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let ledger = Ledger::new(SimClock::new(0));
        let (_, doc, id) = member(&mut rng, Role::Patient);
        let msp = Identity::for_tests(None, Principal::Msp);
        let d1 = crypto::hash(b"b1");
        let d2 = crypto::hash(b"b2");
        ledger.anchor_backup_hash(&id, d1, 1).unwrap();
        ledger.anchor_backup_hash(&id, d2, 2).unwrap();
        assert_eq!(ledger.backup_anchor(&msp, &doc.did, 1).unwrap().digest, d1);
        assert_eq!(ledger.latest_backup_anchor(&msp, &doc.did).unwrap().unwrap().digest, d2);
        assert_eq!(
            ledger.anchor_backup_hash(&id, d1, 1),
            Err(LedgerError::NonMonotoneSequence { last: 2, got: 1 })
        );
        assert!(ledger.backup_anchor(&id, &doc.did, 1).is_err());
    }

    #[test]
    fn registry_epochs_are_contiguous_and_issuer_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let ledger = Ledger::new(SimClock::new(0));
        let (key, doc, id) = member(&mut rng, Role::Practitioner);
        ledger.put_did(&id, &doc).unwrap();
        let anchor = LedgerAnchor { ledger: &ledger, identity: &id };
        let (mut reg, s0) = init_registry(doc.did.clone(), &key, &anchor, &mut rng).unwrap();
        reg.register_credential(Cid::random(&mut rng), &key, &anchor).unwrap();
        reg.register_credential(Cid::random(&mut rng), &key, &anchor).unwrap();
        let latest = ledger.latest_registry_state(&doc.did, &reg.registry_id).unwrap();
        assert_eq!(latest.epoch, 2);
        assert_eq!(ledger.registry_state(&doc.did, &reg.registry_id, 0).unwrap(), s0);

        // skip epoch 3
        let mut gap = reg.signed_state(&key).unwrap();
        gap.epoch = 4;
        gap.issuer_signature =
            key.sign(&RegistryState::signing_bytes(&gap.registry_id, gap.epoch, &gap.root)).unwrap();
        assert_eq!(ledger.anchor_registry_state(&id, &gap), Err(LedgerError::EpochGap { expected: 3, got: 4 }));

        // signed by another key
        let other = crypto::generate_keypair(&mut rng);
        let mut forged = reg.signed_state(&key).unwrap();
        forged.epoch = 3;
        forged.issuer_signature =
            other.sign(&RegistryState::signing_bytes(&forged.registry_id, 3, &forged.root)).unwrap();
        assert_eq!(ledger.anchor_registry_state(&id, &forged), Err(LedgerError::WrongIssuer));
    }

    #[test]
    fn emergency_records_are_msp_only() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let ledger = Ledger::new(SimClock::new(0));
        let (_, doc, doctor) = member(&mut rng, Role::Practitioner);
        let admin = Identity::for_tests(None, Principal::Member(Role::Admin));
        let msp = Identity::for_tests(None, Principal::Msp);
        let rec = |outcome| EmergencyRecord {
            patient_did: None,
            requester_did: doc.did.clone(),
            msp_id: "msp".into(),
            contact_ack: None,
            triggered_at: Timestamp(0),
            outcome,
        };
        assert_eq!(ledger.record_emergency_access(&doctor, &rec(EmergencyOutcome::Denied)), Err(LedgerError::Unauthorized));
        ledger.record_emergency_access(&msp, &rec(EmergencyOutcome::Denied)).unwrap();
        ledger.record_emergency_access(&msp, &rec(EmergencyOutcome::ContactListReleased)).unwrap();
        let records = ledger.emergency_records(&admin).unwrap();
        assert_eq!(
            records.iter().map(|r| r.outcome).collect::<Vec<_>>(),
            vec![EmergencyOutcome::Denied, EmergencyOutcome::ContactListReleased]
        );
        assert!(ledger.emergency_records(&doctor).is_err());
    }

    #[test]
    fn snapshot_roundtrip_replays_identically() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let ledger = Ledger::new(SimClock::new(0));
        for _ in 0..5 {
            let (_, doc, id) = member(&mut rng, Role::Patient);
            ledger.put_did(&id, &doc).unwrap();
            ledger.anchor_backup_hash(&id, crypto::hash(doc.did.id.as_bytes()), 1).unwrap();
        }
        assert!(ledger.verify_replay().unwrap());
        let restored = Ledger::import_json(&ledger.export_json(), SimClock::new(0)).unwrap();
        assert_eq!(restored.state_digest(), ledger.state_digest());
        assert_eq!(restored.export_json(), ledger.export_json());
    }
}
