//! Edge agents (wallets) and the shared cloud agent acting as mediator.

mod backup;
mod envelope;
mod mediator;
mod wallet;

pub use backup::{backup_wallet, restore_backup, BackupPayload};
pub use envelope::{accept_first_contact, pack_envelope, unpack_envelope, Challenge, Envelope, Message};
pub use mediator::{
    AccessGrant, AuditEntry, MediationGrant, Mediator, Notice, QueuedMessage,
};
pub use wallet::{Connection, StoredDid, WalletStore, ANYWISE_ALIAS};

use crate::crypto::CryptoError;
use crate::identity::{Did, IdentityError};
use crate::ledger::LedgerError;

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
pub enum AgentError {
    #[error("no connection {0:?}")]
    UnknownConnection(String),
    #[error("message authentication failed")]
    AuthenticationFailure,
    #[error("replayed envelope: seq {got} not above {last}")]
    Replay { last: u64, got: u64 },
    #[error("no mediator account for {0:?}")]
    UnknownAccount(String),
    #[error("mediation already granted for {0}")]
    DuplicateGrant(Did),
    #[error("no mediation grant for {0}")]
    NoGrant(Did),
    #[error("caller does not own this object")]
    NotOwner,
    #[error("access denied")]
    AccessDenied,
    #[error("access expired")]
    Expired,
    #[error("access revoked")]
    Revoked,
    #[error("no hosted presentation with that id")]
    VpNotFound,
    #[error("no backup stored for {0} at sequence {1}")]
    BackupNotFound(Did, u64),
    #[error("backup does not match its anchored digest")]
    DigestMismatch,
    #[error("wallet has no {0}")]
    Missing(&'static str),
    #[error("wrong passphrase or corrupted wallet file")]
    WrongPassphrase,
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
}
