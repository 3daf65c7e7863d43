use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::membership::require_onboarded;
use super::{anywise_of, link, short, FlowError, Services, ShareKind};
use crate::agents::{backup_wallet, restore_backup, Challenge, Message, WalletStore};
use crate::credentials::VerifiableCredential;
use crate::crypto::{self, KEY_LEN};
use crate::identity::{self, Did, DidSource};
use crate::ledger::{EmergencyOutcome, EmergencyRecord, Role};

const MSP_LABEL: &str = "msp";

/// Asks every contact over its connection to act as a trusted contact and
/// collects their anywise DIDs in order. `share`, when present, travels with
/// the request and is kept by the contact.
fn enlist_contacts<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    patient: &mut WalletStore,
    contacts: &mut [&mut WalletStore],
    share: Option<&[u8]>,
    rng: &mut R,
) -> Result<Vec<Did>, FlowError> {
    if contacts.is_empty() {
        return Err(FlowError::NoContacts);
    }
    let patient_did = require_onboarded(patient)?;
    let mut list = Vec::with_capacity(contacts.len());
    for contact in contacts.iter_mut() {
        let contact: &mut WalletStore = contact;
        let p_alias = link(patient, contact)?;
        let c_alias = link(contact, patient)?;
        let request = match share {
            Some(s) => Message::ContactRequest { patient_did: patient_did.clone(), share: s.to_vec() },
            None => Message::ContactInvite { patient_did: patient_did.clone() },
        };
        svc.send(patient, &p_alias, &request, rng)?;

        match svc.receive_on(contact, &c_alias)? {
            Message::ContactRequest { patient_did: p, share } if p == patient_did => {
                contact.hold_share(&p, share);
                svc.shares.transfer(&contact.owner, &p, ShareKind::Contacts);
            }
            Message::ContactInvite { patient_did: p } if p == patient_did => {}
            _ => return Err(FlowError::UnexpectedMessage("contact_request")),
        }
        let contact_did = anywise_of(contact)?;
        svc.send(contact, &c_alias, &Message::ContactAccept { contact_did }, rng)?;
        let Message::ContactAccept { contact_did } = svc.receive_on(patient, &p_alias)? else {
            return Err(FlowError::UnexpectedMessage("contact_accept"));
        };
        svc.step(&contact.owner, "accept_contact", short(&contact_did));
        list.push(contact_did);
    }
    Ok(list)
}

/// Shares a contact list with the MSP without opting into backups.
pub fn register_contacts<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    patient: &mut WalletStore,
    contacts: &mut [&mut WalletStore],
    rng: &mut R,
) -> Result<Vec<Did>, FlowError> {
    let list = enlist_contacts(svc, patient, contacts, None, rng)?;
    let patient_did = anywise_of(patient)?;
    svc.msp.store_contacts(&patient_did, list.clone());
    svc.step(MSP_LABEL, "store_contacts", list.len());
    Ok(list)
}

/// Opts the patient into backups and the emergency loop: a backup key pair
/// is created and split, the MSP keeps one share with the contact list,
/// every contact keeps a copy of the other, and the first backup is
/// uploaded.
pub fn recovery_setup<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    patient: &mut WalletStore,
    contacts: &mut [&mut WalletStore],
    rng: &mut R,
) -> Result<u64, FlowError> {
    if contacts.is_empty() {
        return Err(FlowError::NoContacts);
    }
    let patient_did = require_onboarded(patient)?;
    let backup_key = crypto::generate_encryption_keypair(rng);
    let shares = crypto::split_key(&backup_key.private_key.0, rng)?;
    patient.set_backup_key(backup_key);
    svc.shares.register_owner(&patient.owner, &patient_did);
    svc.shares.transfer(&patient.owner, &patient_did, ShareKind::Msp);
    svc.shares.transfer(&patient.owner, &patient_did, ShareKind::Contacts);
    svc.step(&patient.owner, "create_backup_key", "split 2-of-2");

    let list = enlist_contacts(svc, patient, contacts, Some(&shares.share_contacts), rng)?;
    svc.msp.store_recovery_share(&patient_did, shares.share_msp, list.clone());
    svc.shares.transfer(MSP_LABEL, &patient_did, ShareKind::Msp);
    svc.step(MSP_LABEL, "store_share", format!("{} contacts", list.len()));

    let (seq, digest) = backup_wallet(patient, &svc.mediator, &svc.ledger, rng)?;
    svc.step(&patient.owner, "backup_wallet", format!("seq {seq} {}", &digest.to_hex()[..16]));
    Ok(seq)
}

/// Rebuilds a lost wallet into `new_wallet`: the MSP and one trusted contact
/// each hand over their share, the latest anchored backup is fetched and
/// checked, and the restored anywise key must answer an MSP challenge
/// before the wallet is accepted.
pub fn recover_wallet<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    new_wallet: &mut WalletStore,
    identity_handle: &str,
    contact: &WalletStore,
    rng: &mut R,
) -> Result<(), FlowError> {
    let patient_did = svc.ca.resolve_identity(identity_handle)?;
    svc.step("ca", "resolve_identity", short(&patient_did));

    let custody = svc.msp.custody(&patient_did).unwrap_or_default();
    let share_msp = custody.share_msp.ok_or(FlowError::MissingShare("msp"))?;
    svc.shares.transfer(&new_wallet.owner, &patient_did, ShareKind::Msp);
    svc.step(MSP_LABEL, "release_share", short(&patient_did));

    let share_contacts = contact.held_share(&patient_did).ok_or(FlowError::MissingShare("contact"))?.to_vec();
    svc.shares.transfer(&new_wallet.owner, &patient_did, ShareKind::Contacts);
    svc.step(&contact.owner, "release_share", short(&patient_did));

    let secret = crypto::combine_parts(&share_msp, &share_contacts)?;
    let secret: [u8; KEY_LEN] = secret.try_into().map_err(|_| FlowError::MissingShare("contact"))?;
    let backup_key = crypto::encryption_keypair_from_secret(secret);

    let anchor = svc
        .ledger
        .latest_backup_anchor(&svc.msp.identity(), &patient_did)?
        .ok_or(FlowError::MissingShare("backup"))?;
    let bytes = svc.mediator.fetch_backup(&patient_did, anchor.sequence_no, &new_wallet.owner, svc.clock.now())?;
    let restored = restore_backup(&bytes, &anchor.digest, &patient_did, &backup_key, anchor.sequence_no);
    svc.step(&new_wallet.owner, "restore_backup", restored.as_ref().map_or_else(|e| e.to_string(), |_| "ok".into()));
    let restored = restored?;

    let nonce = Challenge::random(rng);
    let (did, key) = restored.anywise_key().ok_or(FlowError::IdentityCheckFailed)?;
    let signature = key.sign(nonce.as_ref())?;
    let doc = identity::resolve_did(&did, DidSource::Ledger(&svc.ledger))?;
    if did != patient_did || !crypto::verify(&doc.verification_key, nonce.as_ref(), &signature) {
        svc.step(MSP_LABEL, "identity_check", "failed");
        return Err(FlowError::IdentityCheckFailed);
    }
    svc.step(MSP_LABEL, "identity_check", "ok");

    let owner = new_wallet.owner.clone();
    *new_wallet = restored;
    new_wallet.owner = owner;
    new_wallet.ensure_mediator(&svc.mediator);
    svc.step(&new_wallet.owner, "wallet_restored", format!("{} credentials", new_wallet.credentials().len()));
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum EmergencyData {
    Records(Vec<VerifiableCredential>),
    ContactList(Vec<Did>),
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyResult {
    pub outcome: EmergencyOutcome,
    pub record: EmergencyRecord,
    pub data: EmergencyData,
}

/// A practitioner asks the MSP for access to an unresponsive patient's
/// records. Contacts are pinged in registration order; the first one that
/// answers releases its share. Every call leaves exactly one record on the
/// security channel, written before anything is released.
pub fn emergency_access(
    svc: &Services,
    doctor: &WalletStore,
    patient_identity_ref: &str,
    contacts: &[&WalletStore],
) -> Result<EmergencyResult, FlowError> {
    let doctor_did = require_onboarded(doctor)?;
    if doctor.authorization().map(|a| a.role) != Some(Role::Practitioner) {
        return Err(FlowError::NotPractitioner);
    }
    let patient_did = svc.ca.resolve_identity(patient_identity_ref).ok();
    svc.step(MSP_LABEL, "identify_patient", patient_did.as_ref().map_or("unknown".into(), short));
    let custody = patient_did.as_ref().and_then(|p| svc.msp.custody(p)).unwrap_or_default();
    let anchor = match &patient_did {
        Some(p) => svc.ledger.latest_backup_anchor(&svc.msp.identity(), p)?,
        None => None,
    };

    let mut ack: Option<(Did, Vec<u8>)> = None;
    if let (Some(patient), Some(_), Some(_)) = (&patient_did, &custody.share_msp, &anchor) {
        let mut spent = 0u64;
        for contact_did in &custody.contacts {
            if svc.ping_budget.is_some_and(|b| spent + svc.ping_timeout > b) {
                svc.step(MSP_LABEL, "ping_budget_exhausted", spent);
                break;
            }
            let answer = contacts
                .iter()
                .find(|w| w.anywise_did() == Some(contact_did))
                .filter(|w| w.is_responsive())
                .and_then(|w| w.held_share(patient).map(<[u8]>::to_vec));
            match answer {
                Some(share) => {
                    svc.step(MSP_LABEL, "ping", format!("{} answered", short(contact_did)));
                    ack = Some((contact_did.clone(), share));
                    break;
                }
                None => {
                    svc.clock.advance(svc.ping_timeout);
                    spent += svc.ping_timeout;
                    svc.step(MSP_LABEL, "ping", format!("{} timed out", short(contact_did)));
                }
            }
        }
    }

    let outcome = match (&ack, custody.contacts.is_empty()) {
        (Some(_), _) => EmergencyOutcome::KeyReleased,
        (None, false) => EmergencyOutcome::ContactListReleased,
        (None, true) => EmergencyOutcome::Denied,
    };
    let now = svc.clock.now();
    let record = EmergencyRecord {
        patient_did: patient_did.clone(),
        requester_did: doctor_did,
        msp_id: MSP_LABEL.to_string(),
        contact_ack: ack.as_ref().map(|(d, _)| d.clone()),
        triggered_at: now,
        outcome,
    };
    if let Some((contact_did, _)) = &ack {
        svc.step(MSP_LABEL, "contact_ack", short(contact_did));
    }
    svc.ledger.record_emergency_access(&svc.msp.identity(), &record)?;
    svc.step(MSP_LABEL, "record_emergency_access", format!("{outcome:?}"));
    let subject = patient_did.as_ref().map_or_else(|| patient_identity_ref.to_string(), |d| d.to_string());
    svc.mediator.record_audit(now, &doctor.owner, &format!("emergency_{outcome:?}").to_lowercase(), subject);

    let data = match (outcome, ack, patient_did, anchor) {
        (EmergencyOutcome::KeyReleased, Some((_, share_contacts)), Some(patient), Some(anchor)) => {
            let share_msp = custody.share_msp.expect("checked above");
            svc.shares.authorize_release(&doctor.owner, &patient);
            svc.shares.transfer(&doctor.owner, &patient, ShareKind::Msp);
            svc.shares.transfer(&doctor.owner, &patient, ShareKind::Contacts);
            svc.step(MSP_LABEL, "release_shares", short(&patient));

            let secret: [u8; KEY_LEN] = crypto::combine_parts(&share_msp, &share_contacts)?
                .try_into()
                .map_err(|_| FlowError::MissingShare("contact"))?;
            let key = crypto::encryption_keypair_from_secret(secret);
            svc.step(&doctor.owner, "recombine_key", "ok");
            let bytes = svc.mediator.fetch_backup(&patient, anchor.sequence_no, &doctor.owner, now)?;
            let wallet = restore_backup(&bytes, &anchor.digest, &patient, &key, anchor.sequence_no)?;
            let records: Vec<_> = wallet.credentials().values().cloned().collect();
            svc.step(&doctor.owner, "decrypt_records", records.len());
            EmergencyData::Records(records)
        }
        (EmergencyOutcome::ContactListReleased, ..) => {
            svc.step(MSP_LABEL, "release_contact_list", custody.contacts.len());
            EmergencyData::ContactList(custody.contacts)
        }
        _ => EmergencyData::None,
    };
    Ok(EmergencyResult { outcome, record, data })
}
