//! Encrypted wallet backups kept by the mediator and anchored on the ledger.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::mediator::{MediationGrant, Mediator};
use super::wallet::{StoredDid, WalletStore};
use super::AgentError;
use crate::codec;
use crate::credentials::VerifiableCredential;
use crate::crypto::{self, Digest, KeyPair, SealedBox};
use crate::identity::Did;
use crate::ledger::{Authorization, Certificate, Ledger};
use crate::revocation::RevocationRegistry;

/// What a backup carries. Pairwise DIDs, their keys and all connection
/// state are left out on purpose.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackupPayload {
    pub owner: String,
    pub anywise: Option<StoredDid>,
    pub anywise_key: Option<KeyPair>,
    pub credentials: Vec<VerifiableCredential>,
    pub mediator_endpoint: Option<String>,
    pub grants: Vec<MediationGrant>,
    pub certificate: Option<Certificate>,
    pub authorization: Option<Authorization>,
    pub registry: Option<RevocationRegistry>,
    pub held_shares: BTreeMap<String, String>,
}

fn backup_aad(patient: &Did) -> Vec<u8> {
    let mut aad = b"ssi/backup/v1:".to_vec();
    aad.extend_from_slice(patient.to_string().as_bytes());
    aad
}

/// Seals the wallet to its backup key, anchors the digest of the sealed
/// bytes on the ledger, and only then uploads them to the mediator.
pub fn backup_wallet<R: RngCore + CryptoRng + ?Sized>(
    wallet: &mut WalletStore,
    mediator: &Mediator,
    ledger: &Ledger,
    rng: &mut R,
) -> Result<(u64, Digest), AgentError> {
    let backup_pub = wallet.backup_key().ok_or(AgentError::Missing("backup key"))?.public_key;
    let patient = wallet.anywise_did().cloned().ok_or(AgentError::Missing("anywise DID"))?;
    let identity = wallet.ledger_identity().cloned().ok_or(AgentError::Missing("ledger membership"))?;

    let payload = codec::to_canonical_vec(&wallet.backup_parts());
    let sealed = crypto::seal(&backup_pub, &payload, &backup_aad(&patient), rng)?;
    let bytes = codec::to_canonical_vec(&sealed);
    let digest = crypto::hash(&bytes);
    let seq = wallet.backup_seq() + 1;

    ledger.anchor_backup_hash(&identity, digest, seq)?;
    mediator.store_backup(&patient, seq, bytes);
    wallet.set_backup_seq(seq);
    Ok((seq, digest))
}

/// Checks `bytes` against the anchored digest before decrypting anything,
/// then rebuilds a wallet with no connections.
pub fn restore_backup(
    bytes: &[u8],
    anchored: &Digest,
    patient: &Did,
    backup_key: &KeyPair,
    sequence_no: u64,
) -> Result<WalletStore, AgentError> {
    if &crypto::hash(bytes) != anchored {
        return Err(AgentError::DigestMismatch);
    }
    let sealed: SealedBox = codec::from_json_slice(bytes).map_err(|e| AgentError::Malformed(e.to_string()))?;
    let plain = crypto::open_sealed(backup_key, &sealed, &backup_aad(patient))?;
    let payload: BackupPayload = codec::from_json_slice(&plain).map_err(|e| AgentError::Malformed(e.to_string()))?;
    let mut wallet = WalletStore::from_backup(payload)?;
    wallet.set_backup_key(backup_key.clone());
    wallet.set_backup_seq(sequence_no);
    Ok(wallet)
}
