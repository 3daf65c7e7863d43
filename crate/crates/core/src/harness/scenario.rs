//! JSON scenario scripts: a seed, a cast of actors, an ordered list of flow
//! invocations and a set of end-of-run checks.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "actors": [{"name": "alice", "role": "Patient"}, {"name": "bob", "role": "Practitioner"}],
//!   "steps": [
//!     {"flow": "onboard", "actor": "alice"},
//!     {"flow": "onboard", "actor": "bob"},
//!     {"flow": "connect", "inviter": "bob", "responder": "alice"},
//!     {"flow": "prescription", "doctor": "bob", "patient": "alice",
//!      "claims": {"drug": "amoxicillin"}, "save_as": "rx"}
//!   ],
//!   "assertions": [{"check": "credential_count", "actor": "alice", "count": 1}]
//! }
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{HarnessError, World};
use crate::agents::{Notice, QueuedMessage};
use crate::codec;
use crate::credentials::{VerificationReport, VpId};
use crate::flows::{self, ConnectOptions, EmergencyData, FlowOutcome};
use crate::ledger::{ChannelId, EmergencyOutcome, Role};
use crate::revocation::Cid;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    #[serde(default)]
    pub seed: u64,
    pub actors: Vec<ActorSpec>,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub name: String,
    pub role: Role,
}

/// What a step is expected to produce. By default it must succeed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    #[serde(default)]
    pub fail: bool,
    /// Substring the error message must contain.
    pub error: Option<String>,
    /// Whether the verification report must be fully valid.
    pub valid: Option<bool>,
    pub not_revoked: Option<bool>,
    pub expired: Option<bool>,
    pub outcome: Option<EmergencyOutcome>,
    /// Number of records or contacts released by an emergency request.
    pub released: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    #[serde(flatten)]
    pub action: Action,
    #[serde(default)]
    pub expect: Expect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "flow", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Onboard {
        actor: String,
    },
    Connect {
        inviter: String,
        responder: String,
        #[serde(default)]
        authenticate_responder: bool,
    },
    Issue {
        issuer: String,
        holder: String,
        claims: BTreeMap<String, String>,
        save_as: Option<String>,
    },
    Prescription {
        doctor: String,
        patient: String,
        claims: BTreeMap<String, String>,
        save_as: Option<String>,
    },
    LabResult {
        lab: String,
        patient: String,
        prescription: String,
        claims: BTreeMap<String, String>,
        save_as: Option<String>,
    },
    ShareLocal {
        patient: String,
        practitioner: String,
        claims: Vec<String>,
        ttl: Option<u64>,
    },
    ShareCloud {
        patient: String,
        practitioner: String,
        claims: Vec<String>,
        ttl: u64,
        save_as: Option<String>,
    },
    FetchShared {
        practitioner: String,
        patient: String,
        vp: String,
    },
    RevokeAccess {
        patient: String,
        practitioner: String,
        vp: String,
        #[serde(default)]
        remove: bool,
    },
    RevokeCredential {
        issuer: String,
        cid: String,
    },
    RegisterContacts {
        patient: String,
        contacts: Vec<String>,
    },
    RecoverySetup {
        patient: String,
        contacts: Vec<String>,
    },
    LoseWallet {
        actor: String,
    },
    RecoverWallet {
        actor: String,
        contact: String,
    },
    SetResponsive {
        actor: String,
        responsive: bool,
    },
    Emergency {
        doctor: String,
        patient: String,
        ping_budget: Option<u64>,
    },
    Advance {
        ticks: u64,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Onboard { .. } => "onboard",
            Action::Connect { .. } => "connect",
            Action::Issue { .. } => "issue",
            Action::Prescription { .. } => "prescription",
            Action::LabResult { .. } => "lab_result",
            Action::ShareLocal { .. } => "share_local",
            Action::ShareCloud { .. } => "share_cloud",
            Action::FetchShared { .. } => "fetch_shared",
            Action::RevokeAccess { .. } => "revoke_access",
            Action::RevokeCredential { .. } => "revoke_credential",
            Action::RegisterContacts { .. } => "register_contacts",
            Action::RecoverySetup { .. } => "recovery_setup",
            Action::LoseWallet { .. } => "lose_wallet",
            Action::RecoverWallet { .. } => "recover_wallet",
            Action::SetResponsive { .. } => "set_responsive",
            Action::Emergency { .. } => "emergency",
            Action::Advance { .. } => "advance",
        }
    }

    /// Every actor the step names.
    pub fn actors(&self) -> Vec<&str> {
        match self {
            Action::Onboard { actor } | Action::LoseWallet { actor } | Action::SetResponsive { actor, .. } => vec![actor],
            Action::Connect { inviter, responder, .. } => vec![inviter, responder],
            Action::Issue { issuer, holder, .. } => vec![issuer, holder],
            Action::Prescription { doctor, patient, .. } | Action::Emergency { doctor, patient, .. } => vec![doctor, patient],
            Action::LabResult { lab, patient, .. } => vec![lab, patient],
            Action::ShareLocal { patient, practitioner, .. }
            | Action::ShareCloud { patient, practitioner, .. }
            | Action::FetchShared { practitioner, patient, .. }
            | Action::RevokeAccess { patient, practitioner, .. } => vec![patient, practitioner],
            Action::RevokeCredential { issuer, .. } => vec![issuer],
            Action::RegisterContacts { patient, contacts } | Action::RecoverySetup { patient, contacts } => {
                std::iter::once(patient).chain(contacts).map(String::as_str).collect()
            }
            Action::RecoverWallet { actor, contact } => vec![actor, contact],
            Action::Advance { .. } => Vec::new(),
        }
    }
}

/// End-of-run checks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// Entries on the security channel.
    EmergencyRecords { count: usize },
    CredentialCount { actor: String, count: usize },
    ConnectionCount { actor: String, count: usize },
    /// Access-termination notices waiting in `actor`'s queue for its
    /// connection with `peer`, or already picked up by it.
    TerminationNotices { actor: String, peer: String, count: usize },
    /// Replaying every channel's log reproduces its state.
    LedgerReplays,
    /// No party besides the patient (or a released doctor) holds both shares.
    SharesSeparated,
    /// No plaintext claim value held by any wallet appears in the
    /// mediator's stored bytes, other than claims deliberately disclosed in
    /// hosted presentations.
    MediatorConfidential,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub flow: String,
    pub outcome: FlowOutcome,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionRecord {
    pub assertion: Assertion,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub assertions: Vec<AssertionRecord>,
}

impl Transcript {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.passed) && self.assertions.iter().all(|a| a.passed)
    }

    /// Human-readable description of the first failure, if any.
    pub fn first_failure(&self) -> Option<String> {
        if let Some(s) = self.steps.iter().find(|s| !s.passed) {
            return Some(format!("step {} ({}): {}", s.index, s.flow, s.detail));
        }
        self.assertions.iter().find(|a| !a.passed).map(|a| format!("assertion {:?}: {}", a.assertion, a.detail))
    }

    pub fn to_json(&self) -> Vec<u8> {
        codec::to_canonical_vec(self)
    }
}

pub struct ScenarioRun {
    pub transcript: Transcript,
    pub world: World,
}

impl ScenarioRun {
    pub fn passed(&self) -> bool {
        self.transcript.passed()
    }

    /// Transcript plus the ledger and mediator state at the end of the run.
    pub fn snapshot(&self) -> Vec<u8> {
        let ledger: Value = serde_json::from_slice(&self.world.svc.ledger.export_json()).expect("ledger export is JSON");
        let mediator: Value = serde_json::from_slice(&self.world.svc.mediator.export_json()).expect("mediator export is JSON");
        let transcript = serde_json::to_value(&self.transcript).expect("transcript serializes");
        codec::to_canonical_vec(&serde_json::json!({ "ledger": ledger, "mediator": mediator, "transcript": transcript }))
    }
}

pub fn parse_script(bytes: &[u8]) -> Result<ScenarioScript, HarnessError> {
    serde_json::from_slice(bytes).map_err(|e| HarnessError::Parse(e.to_string()))
}

/// Loads and parses a script from disk.
pub fn load_script(path: &std::path::Path) -> Result<ScenarioScript, HarnessError> {
    parse_script(&std::fs::read(path)?)
}

#[derive(Default)]
struct Refs {
    cids: BTreeMap<String, Cid>,
    vps: BTreeMap<String, VpId>,
}

impl Refs {
    fn cid(&self, name: &str) -> Result<Cid, HarnessError> {
        self.cids.get(name).copied().ok_or_else(|| HarnessError::UnknownReference(name.to_string()))
    }

    fn vp(&self, name: &str) -> Result<VpId, HarnessError> {
        self.vps.get(name).copied().ok_or_else(|| HarnessError::UnknownReference(name.to_string()))
    }
}

/// What a step produced, for checking against its [`Expect`].
#[derive(Default)]
struct Produced {
    report: Option<VerificationReport>,
    emergency: Option<(EmergencyOutcome, usize)>,
    note: String,
}

fn claim_pairs(claims: &BTreeMap<String, String>) -> Vec<(&str, &str)> {
    claims.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect()
}

fn names(claims: &[String]) -> Vec<&str> {
    claims.iter().map(String::as_str).collect()
}

fn save<K: Copy>(map: &mut BTreeMap<String, K>, name: &Option<String>, value: K) {
    if let Some(n) = name {
        map.insert(n.clone(), value);
    }
}

fn execute(world: &mut World, refs: &mut Refs, action: &Action) -> Result<Produced, HarnessError> {
    let mut out = Produced::default();
    match action {
        Action::Onboard { actor } => {
            let auth = world.onboard(actor)?;
            out.note = auth.role.to_string();
        }
        Action::Connect { inviter, responder, authenticate_responder } => {
            let options = ConnectOptions { authenticate_responder: *authenticate_responder };
            let (ia, ra) = (format!("{inviter}->{responder}"), format!("{responder}->{inviter}"));
            world.with_pair(inviter, responder, |svc, i, r, rng| flows::connect(svc, i, r, &ia, &ra, options, rng))??;
        }
        Action::Issue { issuer, holder, claims, save_as } => {
            let cid = world.with_pair(issuer, holder, |svc, i, h, rng| {
                flows::issue_credential(svc, i, h, &claim_pairs(claims), rng)
            })??;
            save(&mut refs.cids, save_as, cid);
            out.note = cid.to_string();
        }
        Action::Prescription { doctor, patient, claims, save_as } => {
            let cid = world.with_pair(doctor, patient, |svc, d, p, rng| {
                flows::prescription(svc, d, p, &claim_pairs(claims), rng)
            })??;
            save(&mut refs.cids, save_as, cid);
            out.note = cid.to_string();
        }
        Action::LabResult { lab, patient, prescription, claims, save_as } => {
            let rx = refs.cid(prescription)?;
            let result = world.with_pair(lab, patient, |svc, l, p, rng| {
                flows::lab_result(svc, l, p, &rx, &claim_pairs(claims), rng)
            })?;
            let cid = match result {
                Err(flows::FlowError::PrescriptionRejected(report)) => {
                    out.report = Some(report);
                    return Err(flows::FlowError::PrescriptionRejected(report).into());
                }
                other => other?,
            };
            save(&mut refs.cids, save_as, cid);
            out.note = cid.to_string();
        }
        Action::ShareLocal { patient, practitioner, claims, ttl } => {
            let report = world.with_pair(patient, practitioner, |svc, p, d, rng| {
                flows::share_local(svc, p, d, &names(claims), *ttl, rng)
            })??;
            out.report = Some(report);
        }
        Action::ShareCloud { patient, practitioner, claims, ttl, save_as } => {
            let (vp_id, report) = world.with_pair(patient, practitioner, |svc, p, d, rng| {
                flows::share_cloud(svc, p, d, &names(claims), *ttl, rng)
            })??;
            save(&mut refs.vps, save_as, vp_id);
            out.report = Some(report);
            out.note = vp_id.to_string();
        }
        Action::FetchShared { practitioner, patient, vp } => {
            let vp_id = refs.vp(vp)?;
            let report = flows::fetch_shared(&world.svc, world.wallet(practitioner)?, world.wallet(patient)?, &vp_id)?;
            out.report = Some(report);
        }
        Action::RevokeAccess { patient, practitioner, vp, remove } => {
            let vp_id = refs.vp(vp)?;
            flows::revoke_access(&world.svc, world.wallet(patient)?, world.wallet(practitioner)?, &vp_id, *remove)?;
        }
        Action::RevokeCredential { issuer, cid } => {
            let cid = refs.cid(cid)?;
            let w = world.wallets.get_mut(issuer).ok_or_else(|| HarnessError::UnknownActor(issuer.clone()))?;
            flows::revoke_credential(&world.svc, w, &cid)?;
        }
        Action::RegisterContacts { patient, contacts } => {
            let list = world.with_group(patient, contacts, flows::register_contacts)??;
            out.note = format!("{} contacts", list.len());
        }
        Action::RecoverySetup { patient, contacts } => {
            let seq = world.with_group(patient, contacts, flows::recovery_setup)??;
            out.note = format!("backup seq {seq}");
        }
        Action::LoseWallet { actor } => {
            world.lose_wallet(actor)?;
        }
        Action::RecoverWallet { actor, contact } => {
            let handle = World::identity_handle(actor);
            world.with_pair(actor, contact, |svc, w, c, rng| flows::recover_wallet(svc, w, &handle, c, rng))??;
            out.note = format!("{} credentials", world.wallet(actor)?.credentials().len());
        }
        Action::SetResponsive { actor, responsive } => {
            world.wallet_mut(actor)?.set_responsive(*responsive);
        }
        Action::Emergency { doctor, patient, ping_budget } => {
            let saved = world.svc.ping_budget;
            world.svc.ping_budget = *ping_budget;
            let handle = World::identity_handle(patient);
            let others: Vec<_> = world.wallets.iter().filter(|(n, _)| *n != doctor).map(|(_, w)| w).collect();
            let result = flows::emergency_access(&world.svc, world.wallet(doctor)?, &handle, &others);
            world.svc.ping_budget = saved;
            let result = result?;
            let released = match &result.data {
                EmergencyData::Records(r) => r.len(),
                EmergencyData::ContactList(c) => c.len(),
                EmergencyData::None => 0,
            };
            out.emergency = Some((result.outcome, released));
            out.note = format!("{:?} ({released} released)", result.outcome);
        }
        Action::Advance { ticks } => {
            out.note = world.svc.clock.advance(*ticks).to_string();
        }
    }
    Ok(out)
}

fn check_expect(expect: &Expect, result: &Result<Produced, HarnessError>) -> Result<String, String> {
    let produced = match (result, expect.fail || expect.error.is_some()) {
        (Ok(p), false) => p,
        (Ok(_), true) => return Err("expected the step to fail".into()),
        (Err(e), false) => return Err(e.to_string()),
        (Err(e), true) => {
            let msg = e.to_string();
            return match &expect.error {
                Some(want) if !msg.contains(want.as_str()) => Err(format!("error {msg:?} does not mention {want:?}")),
                _ => Ok(format!("failed as expected: {msg}")),
            };
        }
    };
    let report = &produced.report;
    let field = |name: &str, want: Option<bool>, got: Option<bool>| match want {
        Some(w) if got != Some(w) => Err(format!("{name}: expected {w}, got {got:?}")),
        _ => Ok(()),
    };
    field("valid", expect.valid, report.as_ref().map(VerificationReport::is_valid))?;
    field("not_revoked", expect.not_revoked, report.as_ref().and_then(|r| r.not_revoked))?;
    field("expired", expect.expired, report.as_ref().and_then(|r| r.expired))?;
    if let Some(want) = expect.outcome {
        let got = produced.emergency.map(|e| e.0);
        if got != Some(want) {
            return Err(format!("outcome: expected {want:?}, got {got:?}"));
        }
    }
    if let Some(want) = expect.released {
        let got = produced.emergency.map(|e| e.1);
        if got != Some(want) {
            return Err(format!("released: expected {want}, got {got:?}"));
        }
    }
    Ok(produced.note.clone())
}

fn termination_notices(world: &World, actor: &str, peer: &str) -> Result<usize, HarnessError> {
    let w = world.wallet(actor)?;
    let p = world.wallet(peer)?;
    let alias = w.connection_with(p).ok_or_else(|| HarnessError::UnknownReference(format!("{actor}->{peer}")))?;
    let me = w.connection(&alias).expect("alias from connection_with").my_pairwise.clone();
    let queued = world
        .svc
        .mediator
        .peek(&me)
        .into_iter()
        .filter(|m| matches!(m, QueuedMessage::Notice(Notice::AccessTerminated { .. })))
        .count();
    let seen = w.notices().iter().filter(|n| matches!(n, Notice::AccessTerminated { .. })).count();
    Ok(queued + seen)
}

/// Plaintext claim values held by any wallet, minus those disclosed in
/// presentations the mediator hosts.
pub fn mediator_leaks(world: &World) -> Vec<String> {
    let export = world.svc.mediator.export_json();
    let hosted: Value = serde_json::from_slice(&export).expect("mediator export is JSON");
    let mut disclosed = std::collections::BTreeSet::new();
    if let Some(map) = hosted.get("hosted").and_then(Value::as_object) {
        for h in map.values() {
            for d in h.pointer("/vp/disclosed").and_then(Value::as_array).into_iter().flatten() {
                for c in d.get("claims").and_then(Value::as_array).into_iter().flatten() {
                    if let Some(v) = c.get("value").and_then(Value::as_str) {
                        disclosed.insert(v.to_string());
                    }
                }
            }
        }
    }
    let text = String::from_utf8_lossy(&export);
    let mut leaks = Vec::new();
    for w in world.wallets.values() {
        for vc in w.credentials().values() {
            for c in &vc.claims {
                let quoted = serde_json::to_string(&c.value).expect("string");
                if !disclosed.contains(&c.value) && text.contains(&quoted) {
                    leaks.push(format!("{}={}", c.name, c.value));
                }
            }
        }
    }
    leaks
}

fn check_assertion(world: &World, a: &Assertion) -> Result<String, String> {
    let count = |what: &str, got: usize, want: usize| {
        if got == want {
            Ok(format!("{what} = {got}"))
        } else {
            Err(format!("{what}: expected {want}, got {got}"))
        }
    };
    let e = |e: HarnessError| e.to_string();
    match a {
        Assertion::EmergencyRecords { count: want } => {
            let got = world.svc.ledger.tx_count(ChannelId::Security);
            count("security records", got, *want)
        }
        Assertion::CredentialCount { actor, count: want } => {
            count("credentials", world.wallet(actor).map_err(e)?.credentials().len(), *want)
        }
        Assertion::ConnectionCount { actor, count: want } => {
            count("connections", world.wallet(actor).map_err(e)?.connections().len(), *want)
        }
        Assertion::TerminationNotices { actor, peer, count: want } => {
            count("termination notices", termination_notices(world, actor, peer).map_err(e)?, *want)
        }
        Assertion::LedgerReplays => match world.svc.ledger.verify_replay() {
            Ok(true) => Ok(format!("{} transactions replayed", ChannelId::ALL.iter().map(|c| world.svc.ledger.tx_count(*c)).sum::<usize>())),
            Ok(false) => Err("replayed state differs".into()),
            Err(err) => Err(err.to_string()),
        },
        Assertion::SharesSeparated => {
            let v = world.svc.shares.violations();
            if v.is_empty() {
                Ok("no party holds both shares".into())
            } else {
                Err(format!("{v:?}"))
            }
        }
        Assertion::MediatorConfidential => {
            let leaks = mediator_leaks(world);
            if leaks.is_empty() {
                Ok("no plaintext claims in mediator storage".into())
            } else {
                Err(format!("leaked: {leaks:?}"))
            }
        }
    }
}

/// Runs every step in order, continuing past failures so the transcript is
/// complete, then evaluates the assertions.
pub fn run_script(script: &ScenarioScript) -> Result<ScenarioRun, HarnessError> {
    let mut world = World::new(script.seed);
    for a in &script.actors {
        world.add_actor(&a.name, a.role)?;
    }
    for step in &script.steps {
        if let Some(name) = step.action.actors().into_iter().find(|n| world.role(n).is_none()) {
            return Err(HarnessError::UnknownActor(name.to_string()));
        }
    }
    let mut refs = Refs::default();
    let mut steps = Vec::with_capacity(script.steps.len());
    for (index, step) in script.steps.iter().enumerate() {
        let flow = step.action.name();
        world.svc.take_trace();
        let produced = execute(&mut world, &mut refs, &step.action);
        let trace = world.svc.take_trace();
        let success = produced.is_ok();
        let checked = check_expect(&step.expect, &produced);
        let mut flow_steps = trace;
        if let Err(e) = &produced {
            flow_steps.push(flows::FlowStep { actor: "flow".into(), action: "error".into(), result: e.to_string() });
        }
        let (passed, detail) = match checked {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        steps.push(StepRecord {
            index,
            flow: flow.to_string(),
            outcome: FlowOutcome { flow_name: flow.to_string(), steps: flow_steps, success },
            passed,
            detail,
        });
    }
    let assertions = script
        .assertions
        .iter()
        .map(|a| {
            let (passed, detail) = match check_assertion(&world, a) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            AssertionRecord { assertion: a.clone(), passed, detail }
        })
        .collect();
    Ok(ScenarioRun { transcript: Transcript { seed: script.seed, steps, assertions }, world })
}
