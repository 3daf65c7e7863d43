//! The cloud agent: mediation grants with FIFO pickup queues, hosted
//! presentations behind time-limited grants, encrypted backups, and an audit
//! log of every presentation fetch and backup read.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::envelope::Envelope;
use super::AgentError;
use crate::clock::Timestamp;
use crate::codec::{self, b58_vec};
use crate::credentials::{VerifiablePresentation, VpId};
use crate::identity::Did;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediationGrant {
    pub recipient_did: Did,
    pub queue_id: u64,
    pub granted_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "notice", rename_all = "snake_case")]
pub enum Notice {
    AccessTerminated { vp_id: VpId, at: Timestamp },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueuedMessage {
    Envelope(Envelope),
    Notice(Notice),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessGrant {
    pub vp_id: VpId,
    pub grantee_did: Did,
    pub expires_at: Timestamp,
    pub revoked: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: Timestamp,
    pub actor: String,
    pub action: String,
    pub subject: String,
    pub result: String,
}

#[derive(Clone, Serialize)]
struct HostedVp {
    owner: Did,
    vp: VerifiablePresentation,
    grants: BTreeMap<String, AccessGrant>,
}

#[derive(Clone, Serialize)]
struct StoredBackup {
    patient: Did,
    sequence_no: u64,
    #[serde(with = "b58_vec")]
    bytes: Vec<u8>,
}

#[derive(Default)]
struct State {
    accounts: BTreeSet<String>,
    grants: BTreeMap<Did, MediationGrant>,
    queues: BTreeMap<u64, VecDeque<QueuedMessage>>,
    next_queue: u64,
    hosted: BTreeMap<VpId, HostedVp>,
    backups: BTreeMap<(Did, u64), Vec<u8>>,
    audit: Vec<AuditEntry>,
}

impl State {
    fn queue_for(&mut self, did: &Did) -> Result<&mut VecDeque<QueuedMessage>, AgentError> {
        let id = self.grants.get(did).ok_or_else(|| AgentError::NoGrant(did.clone()))?.queue_id;
        Ok(self.queues.entry(id).or_default())
    }

    fn log(&mut self, at: Timestamp, actor: &str, action: &str, subject: String, result: &Result<(), AgentError>) {
        let result = match result {
            Ok(()) => "ok".to_string(),
            Err(e) => e.to_string(),
        };
        self.audit.push(AuditEntry { at, actor: actor.to_string(), action: action.to_string(), subject, result });
    }
}

#[derive(Serialize)]
struct Export<'a> {
    endpoint: &'a str,
    accounts: &'a BTreeSet<String>,
    grants: Vec<&'a MediationGrant>,
    queues: BTreeMap<String, &'a VecDeque<QueuedMessage>>,
    hosted: BTreeMap<String, &'a HostedVp>,
    backups: Vec<StoredBackup>,
    audit: &'a [AuditEntry],
}

pub struct Mediator {
    endpoint: String,
    state: Mutex<State>,
}

impl Mediator {
    pub fn new(endpoint: &str) -> Self {
        Mediator { endpoint: endpoint.to_string(), state: Mutex::new(State::default()) }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn register_account(&self, owner: &str) {
        self.state.lock().accounts.insert(owner.to_string());
    }

    pub fn request_mediation(&self, owner: &str, recipient_did: &Did, now: Timestamp) -> Result<MediationGrant, AgentError> {
        let mut st = self.state.lock();
        if !st.accounts.contains(owner) {
            return Err(AgentError::UnknownAccount(owner.to_string()));
        }
        if st.grants.contains_key(recipient_did) {
            return Err(AgentError::DuplicateGrant(recipient_did.clone()));
        }
        let queue_id = st.next_queue;
        st.next_queue += 1;
        st.queues.insert(queue_id, VecDeque::new());
        let grant = MediationGrant { recipient_did: recipient_did.clone(), queue_id, granted_at: now };
        st.grants.insert(recipient_did.clone(), grant.clone());
        Ok(grant)
    }

    pub fn grant_for(&self, recipient_did: &Did) -> Option<MediationGrant> {
        self.state.lock().grants.get(recipient_did).cloned()
    }

    pub fn deliver(&self, env: Envelope) -> Result<(), AgentError> {
        let mut st = self.state.lock();
        let to = env.to.clone();
        st.queue_for(&to)?.push_back(QueuedMessage::Envelope(env));
        Ok(())
    }

    pub fn deliver_notice(&self, to: &Did, notice: Notice) -> Result<(), AgentError> {
        self.state.lock().queue_for(to)?.push_back(QueuedMessage::Notice(notice));
        Ok(())
    }

    /// Removes and returns up to `max_n` queued items, oldest first.
    pub fn pickup(&self, recipient_did: &Did, max_n: usize) -> Result<Vec<QueuedMessage>, AgentError> {
        let mut st = self.state.lock();
        let queue = st.queue_for(recipient_did)?;
        let n = max_n.min(queue.len());
        Ok(queue.drain(..n).collect())
    }

    pub fn queue_len(&self, recipient_did: &Did) -> usize {
        let mut st = self.state.lock();
        st.queue_for(recipient_did).map_or(0, |q| q.len())
    }

    /// Copies of the queued items for `recipient_did`, without removing them.
    pub fn peek(&self, recipient_did: &Did) -> Vec<QueuedMessage> {
        let mut st = self.state.lock();
        st.queue_for(recipient_did).map_or_else(|_| Vec::new(), |q| q.iter().cloned().collect())
    }

    /// Total queued items across all recipients.
    pub fn queued_total(&self) -> usize {
        self.state.lock().queues.values().map(VecDeque::len).sum()
    }

    pub fn host_vp(&self, vp: VerifiablePresentation, owner_did: &Did) -> Result<VpId, AgentError> {
        if &vp.holder_did != owner_did {
            return Err(AgentError::NotOwner);
        }
        let mut st = self.state.lock();
        let vp_id = vp.vp_id;
        if st.hosted.contains_key(&vp_id) {
            return Err(AgentError::NotOwner);
        }
        st.hosted.insert(vp_id, HostedVp { owner: owner_did.clone(), vp, grants: BTreeMap::new() });
        Ok(vp_id)
    }

    pub fn grant_access(
        &self,
        vp_id: &VpId,
        caller: &Did,
        grantee_did: &Did,
        ttl: u64,
        now: Timestamp,
    ) -> Result<AccessGrant, AgentError> {
        let mut st = self.state.lock();
        let hosted = st.hosted.get_mut(vp_id).ok_or(AgentError::VpNotFound)?;
        if &hosted.owner != caller {
            return Err(AgentError::NotOwner);
        }
        let grant = AccessGrant { vp_id: *vp_id, grantee_did: grantee_did.clone(), expires_at: now.plus(ttl), revoked: false };
        hosted.grants.insert(grantee_did.to_string(), grant.clone());
        Ok(grant)
    }

    /// Revokes `grantee_did`'s access and queues a termination notice for it.
    pub fn revoke_access(&self, vp_id: &VpId, caller: &Did, grantee_did: &Did, now: Timestamp) -> Result<(), AgentError> {
        let mut st = self.state.lock();
        let hosted = st.hosted.get_mut(vp_id).ok_or(AgentError::VpNotFound)?;
        if &hosted.owner != caller {
            return Err(AgentError::NotOwner);
        }
        let grant = hosted.grants.get_mut(&grantee_did.to_string()).ok_or(AgentError::AccessDenied)?;
        grant.revoked = true;
        if let Ok(queue) = st.queue_for(grantee_did) {
            queue.push_back(QueuedMessage::Notice(Notice::AccessTerminated { vp_id: *vp_id, at: now }));
        }
        Ok(())
    }

    /// Deletes the hosted presentation and every grant on it.
    pub fn remove_vp(&self, vp_id: &VpId, caller: &Did) -> Result<(), AgentError> {
        let mut st = self.state.lock();
        let hosted = st.hosted.get(vp_id).ok_or(AgentError::VpNotFound)?;
        if &hosted.owner != caller {
            return Err(AgentError::NotOwner);
        }
        st.hosted.remove(vp_id);
        Ok(())
    }

    pub fn is_hosted(&self, vp_id: &VpId) -> bool {
        self.state.lock().hosted.contains_key(vp_id)
    }

    pub fn fetch_vp(&self, vp_id: &VpId, grantee_did: &Did, now: Timestamp) -> Result<VerifiablePresentation, AgentError> {
        let mut st = self.state.lock();
        let result = match st.hosted.get(vp_id) {
            None => Err(AgentError::VpNotFound),
            Some(hosted) => match hosted.grants.get(&grantee_did.to_string()) {
                None => Err(AgentError::AccessDenied),
                Some(g) if g.revoked => Err(AgentError::Revoked),
                Some(g) if now >= g.expires_at => Err(AgentError::Expired),
                Some(_) => Ok(hosted.vp.clone()),
            },
        };
        let logged = result.as_ref().map(|_| ()).map_err(Clone::clone);
        st.log(now, &grantee_did.to_string(), "fetch_vp", vp_id.to_string(), &logged);
        result
    }

    pub fn store_backup(&self, patient: &Did, sequence_no: u64, bytes: Vec<u8>) {
        self.state.lock().backups.insert((patient.clone(), sequence_no), bytes);
    }

    pub fn fetch_backup(&self, patient: &Did, sequence_no: u64, requester: &str, now: Timestamp) -> Result<Vec<u8>, AgentError> {
        let mut st = self.state.lock();
        let result = st
            .backups
            .get(&(patient.clone(), sequence_no))
            .cloned()
            .ok_or_else(|| AgentError::BackupNotFound(patient.clone(), sequence_no));
        let logged = result.as_ref().map(|_| ()).map_err(Clone::clone);
        st.log(now, requester, "fetch_backup", format!("{patient}#{sequence_no}"), &logged);
        result
    }

    /// Rewrites a stored backup in place, as storage corruption or a
    /// malicious operator would.
    pub fn tamper_backup(&self, patient: &Did, sequence_no: u64, f: impl FnOnce(&mut Vec<u8>)) -> bool {
        match self.state.lock().backups.get_mut(&(patient.clone(), sequence_no)) {
            Some(bytes) => {
                f(bytes);
                true
            }
            None => false,
        }
    }

    pub fn record_audit(&self, at: Timestamp, actor: &str, action: &str, subject: String) {
        self.state.lock().log(at, actor, action, subject, &Ok(()));
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.state.lock().audit.clone()
    }

    /// Canonical JSON snapshot of everything the mediator stores.
    pub fn export_json(&self) -> Vec<u8> {
        let st = self.state.lock();
        let export = Export {
            endpoint: &self.endpoint,
            accounts: &st.accounts,
            grants: st.grants.values().collect(),
            queues: st.queues.iter().map(|(k, v)| (format!("{k:08}"), v)).collect(),
            hosted: st.hosted.iter().map(|(k, v)| (k.to_string(), v)).collect(),
            backups: st
                .backups
                .iter()
                .map(|((p, s), b)| StoredBackup { patient: p.clone(), sequence_no: *s, bytes: b.clone() })
                .collect(),
            audit: &st.audit,
        };
        codec::to_canonical_vec(&export)
    }
}
