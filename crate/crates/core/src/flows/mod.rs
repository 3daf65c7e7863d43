//! End-to-end protocols between wallets, the mediator, the ledger and its
//! trust roots. Every flow records the steps it takes into the shared
//! [`Services`] trace so runs can be compared step by step.

mod exchange;
mod membership;
mod recovery;

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

pub use exchange::{
    fetch_shared, issue_credential, lab_result, prescription, revoke_access, revoke_credential, share_cloud,
    share_local,
};
pub use membership::{connect, onboard, ConnectOptions, ConnectionPair};
pub use recovery::{
    emergency_access, recover_wallet, recovery_setup, register_contacts, EmergencyData, EmergencyResult,
};

use crate::agents::{
    accept_first_contact, pack_envelope, unpack_envelope, AgentError, Mediator, Message, QueuedMessage, WalletStore,
};
use crate::clock::SimClock;
use crate::credentials::{CredentialError, VerificationReport, WitnessDirectory};
use crate::crypto::CryptoError;
use crate::identity::{Did, IdentityError};
use crate::ledger::{AuthorityError, CertificateAuthority, Ledger, LedgerError, Msp};
use crate::revocation::RevocationError;

pub const MEDIATOR_ENDPOINT: &str = "mediator://cloud-agent";

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
pub enum FlowError {
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Authority(#[from] AuthorityError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Credential(#[from] CredentialError),
    #[error(transparent)]
    Revocation(#[from] RevocationError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("{0} is not onboarded")]
    NotOnboarded(String),
    #[error("{0} and {1} are not connected")]
    NotConnected(String, String),
    #[error("authentication challenge failed")]
    ChallengeFailure,
    #[error("expected a {0} message")]
    UnexpectedMessage(&'static str),
    #[error("at least one trusted contact is required")]
    NoContacts,
    #[error("missing key share from {0}")]
    MissingShare(&'static str),
    #[error("prescription rejected: {0:?}")]
    PrescriptionRejected(VerificationReport),
    #[error("received credential failed verification: {0:?}")]
    CredentialRejected(VerificationReport),
    #[error("identity check with the MSP failed")]
    IdentityCheckFailed,
    #[error("only practitioners can start an emergency request")]
    NotPractitioner,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowStep {
    pub actor: String,
    pub action: String,
    pub result: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowOutcome {
    pub flow_name: String,
    pub steps: Vec<FlowStep>,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShareKind {
    Msp,
    Contacts,
}

/// Records every movement of a recovery key share so tests can check that
/// no single party other than the patient ends up with both halves.
#[derive(Default)]
pub struct ShareTracker {
    owners: Mutex<BTreeMap<String, String>>,
    holdings: Mutex<BTreeMap<(String, String), BTreeSet<ShareKind>>>,
    releases: Mutex<BTreeSet<(String, String)>>,
}

impl ShareTracker {
    /// Names `party` as the patient itself; it may hold both shares.
    pub fn register_owner(&self, party: &str, patient: &Did) {
        self.owners.lock().insert(patient.to_string(), party.to_string());
    }

    pub fn transfer(&self, party: &str, patient: &Did, kind: ShareKind) {
        self.holdings.lock().entry((party.to_string(), patient.to_string())).or_default().insert(kind);
    }

    /// Marks `party` as an emergency release target for `patient`.
    pub fn authorize_release(&self, party: &str, patient: &Did) {
        self.releases.lock().insert((party.to_string(), patient.to_string()));
    }

    pub fn holds(&self, party: &str, patient: &Did) -> BTreeSet<ShareKind> {
        self.holdings.lock().get(&(party.to_string(), patient.to_string())).cloned().unwrap_or_default()
    }

    /// `(party, patient)` pairs where someone other than the patient holds
    /// both shares without an emergency release.
    pub fn violations(&self) -> Vec<(String, String)> {
        let owners = self.owners.lock();
        let releases = self.releases.lock();
        self.holdings
            .lock()
            .iter()
            .filter(|(_, kinds)| kinds.len() == 2)
            .map(|(k, _)| k.clone())
            .filter(|(party, patient)| owners.get(patient) != Some(party) && !releases.contains(&(party.clone(), patient.clone())))
            .collect()
    }
}

/// The shared infrastructure every flow runs against.
pub struct Services {
    pub clock: SimClock,
    pub ledger: Ledger,
    pub ca: CertificateAuthority,
    pub msp: Msp,
    pub mediator: Mediator,
    pub witnesses: WitnessDirectory,
    pub shares: ShareTracker,
    /// Ticks the MSP waits for each trusted contact to answer.
    pub ping_timeout: u64,
    /// Total ticks the MSP may spend pinging contacts; `None` pings all.
    pub ping_budget: Option<u64>,
    trace: Mutex<Vec<FlowStep>>,
}

impl Services {
    pub fn new<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let clock = SimClock::new(0);
        let ca = CertificateAuthority::new(rng);
        let msp = Msp::new(ca.root_key());
        Services {
            ledger: Ledger::new(clock.clone()),
            clock,
            ca,
            msp,
            mediator: Mediator::new(MEDIATOR_ENDPOINT),
            witnesses: WitnessDirectory::default(),
            shares: ShareTracker::default(),
            ping_timeout: 1,
            ping_budget: None,
            trace: Mutex::new(Vec::new()),
        }
    }

    pub fn step(&self, actor: &str, action: &str, result: impl std::fmt::Display) {
        self.trace.lock().push(FlowStep { actor: actor.to_string(), action: action.to_string(), result: result.to_string() });
    }

    pub fn take_trace(&self) -> Vec<FlowStep> {
        std::mem::take(&mut *self.trace.lock())
    }

    /// Runs `f` and packages the steps it recorded into a [`FlowOutcome`].
    pub fn run<T>(&self, flow_name: &str, f: impl FnOnce(&Self) -> Result<T, FlowError>) -> (FlowOutcome, Result<T, FlowError>) {
        let mark = self.trace.lock().len();
        let result = f(self);
        if let Err(e) = &result {
            self.step("flow", "error", e);
        }
        let steps = self.trace.lock().split_off(mark);
        (FlowOutcome { flow_name: flow_name.to_string(), steps, success: result.is_ok() }, result)
    }

    /// Packs `message` on `alias` and hands it to the mediator.
    pub(crate) fn send<R: RngCore + CryptoRng + ?Sized>(
        &self,
        wallet: &mut WalletStore,
        alias: &str,
        message: &Message,
        rng: &mut R,
    ) -> Result<(), FlowError> {
        let env = pack_envelope(wallet, alias, message, rng)?;
        self.mediator.deliver(env)?;
        Ok(())
    }

    /// Picks up the next envelope addressed to `my_did`, keeping any
    /// notices found on the way, and opens it.
    pub(crate) fn receive(&self, wallet: &mut WalletStore, my_did: &Did, first_contact: bool) -> Result<(String, Message), FlowError> {
        loop {
            let item = self.mediator.pickup(my_did, 1)?.pop().ok_or(FlowError::UnexpectedMessage("queued"))?;
            match item {
                QueuedMessage::Notice(n) => wallet.push_notice(n),
                QueuedMessage::Envelope(env) if first_contact => return Ok(accept_first_contact(wallet, &env)?),
                QueuedMessage::Envelope(env) => return Ok(unpack_envelope(wallet, &env)?),
            }
        }
    }

    pub(crate) fn receive_on(&self, wallet: &mut WalletStore, alias: &str) -> Result<Message, FlowError> {
        let me = wallet
            .connection(alias)
            .map(|c| c.my_pairwise.clone())
            .ok_or_else(|| AgentError::UnknownConnection(alias.to_string()))?;
        Ok(self.receive(wallet, &me, false)?.1)
    }
}

/// Connection alias `a` uses for `b`, or an error naming both.
pub(crate) fn link(a: &WalletStore, b: &WalletStore) -> Result<String, FlowError> {
    a.connection_with(b).ok_or_else(|| FlowError::NotConnected(a.owner.clone(), b.owner.clone()))
}

pub(crate) fn anywise_of(w: &WalletStore) -> Result<Did, FlowError> {
    w.anywise_did().cloned().ok_or_else(|| FlowError::NotOnboarded(w.owner.clone()))
}

pub(crate) fn short(did: &Did) -> String {
    did.id.chars().take(8).collect()
}
