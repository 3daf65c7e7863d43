use rand::{CryptoRng, RngCore};

use super::membership::require_onboarded;
use super::{anywise_of, link, short, FlowError, Services};
use crate::agents::{AgentError, Message, WalletStore};
use crate::credentials::{
    self, CredentialError, LedgerView, VerificationReport, VerifiablePresentation, VpId, PARENT_CID_CLAIM,
};
use crate::ledger::LedgerAnchor;
use crate::revocation::Cid;

fn report_line(r: &VerificationReport) -> String {
    let opt = |v: Option<bool>| v.map_or("-".to_string(), |b| b.to_string());
    format!(
        "sig={} issuer={} not_revoked={} holder={} disclosure={} audience={} expired={}",
        r.signature_ok,
        r.issuer_known,
        opt(r.not_revoked),
        opt(r.holder_signature_ok),
        opt(r.disclosure_ok),
        opt(r.audience_ok),
        opt(r.expired)
    )
}

/// Issues a credential from `issuer` to `holder` over their connection. The
/// holder tells the issuer which DID to put in the subject (its anywise
/// DID) and checks the credential before storing it.
pub fn issue_credential<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    issuer: &mut WalletStore,
    holder: &mut WalletStore,
    claims: &[(&str, &str)],
    rng: &mut R,
) -> Result<Cid, FlowError> {
    require_onboarded(issuer)?;
    let i_alias = link(issuer, holder)?;
    let h_alias = link(holder, issuer)?;

    svc.send(issuer, &i_alias, &Message::SubjectRequest, rng)?;
    let Message::SubjectRequest = svc.receive_on(holder, &h_alias)? else {
        return Err(FlowError::UnexpectedMessage("subject_request"));
    };
    let subject_did = anywise_of(holder)?;
    svc.send(holder, &h_alias, &Message::SubjectInfo { subject_did }, rng)?;
    let Message::SubjectInfo { subject_did } = svc.receive_on(issuer, &i_alias)? else {
        return Err(FlowError::UnexpectedMessage("subject_info"));
    };

    let vc = credentials::issue_vc(issuer, &svc.ledger, &subject_did, claims, svc.clock.now(), rng)?;
    if let Some(reg) = issuer.registry() {
        svc.witnesses.publish(reg);
    }
    let cid = vc.cid();
    svc.step(&issuer.owner, "issue_vc", cid);
    svc.send(issuer, &i_alias, &Message::Credential { vc }, rng)?;

    let Message::Credential { vc } = svc.receive_on(holder, &h_alias)? else {
        return Err(FlowError::UnexpectedMessage("credential"));
    };
    let report = credentials::verify_vc(&vc, LedgerView { ledger: &svc.ledger, witnesses: &svc.witnesses });
    svc.step(&holder.owner, "verify_vc", report_line(&report));
    if !report.is_valid() || vc.envelope.subject_did != subject_did {
        return Err(FlowError::CredentialRejected(report));
    }
    holder.store_credential(vc);
    svc.step(&holder.owner, "store_vc", cid);
    Ok(cid)
}

pub fn prescription<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    doctor: &mut WalletStore,
    patient: &mut WalletStore,
    rx_claims: &[(&str, &str)],
    rng: &mut R,
) -> Result<Cid, FlowError> {
    issue_credential(svc, doctor, patient, rx_claims, rng)
}

/// The patient shows the prescription to the lab in person; the lab checks
/// it and, if it holds, issues the result credential linked to it.
pub fn lab_result<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    lab: &mut WalletStore,
    patient: &mut WalletStore,
    prescription_cid: &Cid,
    result_claims: &[(&str, &str)],
    rng: &mut R,
) -> Result<Cid, FlowError> {
    let vc = patient
        .credential(prescription_cid)
        .cloned()
        .ok_or(CredentialError::UnknownCredential(*prescription_cid))?;
    let names: Vec<&str> = vc.claims.iter().map(|c| c.name.as_str()).collect();
    let report = present_locally(svc, patient, lab, &[*prescription_cid], &names, None, rng)?;
    svc.step(&lab.owner, "check_prescription", report_line(&report));
    if !report.is_valid() {
        return Err(FlowError::PrescriptionRejected(report));
    }
    let parent = prescription_cid.to_b58();
    let mut claims: Vec<(&str, &str)> = result_claims.to_vec();
    claims.push((PARENT_CID_CLAIM, &parent));
    issue_credential(svc, lab, patient, &claims, rng)
}

/// Builds a presentation for the verifier's pairwise DID and hands it over
/// out of band; the verifier checks it and keeps nothing.
fn present_locally<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    holder: &WalletStore,
    verifier: &WalletStore,
    cids: &[Cid],
    names: &[&str],
    ttl: Option<u64>,
    rng: &mut R,
) -> Result<VerificationReport, FlowError> {
    let h_alias = link(holder, verifier)?;
    let v_alias = link(verifier, holder)?;
    let audience = holder.connection(&h_alias).expect("linked").their_pairwise.clone();
    let now = svc.clock.now();
    let vp = credentials::create_vp(holder, &svc.witnesses, cids, names, &audience, ttl, now, rng)?;
    let qr = vp.to_bytes();
    svc.step(&holder.owner, "show_vp", format!("{} claims", vp.disclosed_claims().count()));

    let vp = VerifiablePresentation::from_bytes(&qr).map_err(|e| AgentError::Malformed(e.to_string()))?;
    let me = verifier.connection(&v_alias).expect("linked").my_pairwise.clone();
    Ok(credentials::verify_vp(&vp, &svc.ledger, &me, svc.clock.now()))
}

fn pick_credentials(patient: &WalletStore, names: &[&str]) -> Result<Vec<Cid>, FlowError> {
    let cids = patient.credentials_with_claims(names);
    match names.iter().find(|n| !cids.iter().any(|c| patient.credential(c).is_some_and(|vc| vc.claim(n).is_some()))) {
        Some(missing) => Err(CredentialError::UnknownClaim(missing.to_string()).into()),
        None => Ok(cids),
    }
}

/// In-person sharing: the practitioner reads a QR code from the patient's
/// device. Nothing goes through the mediator.
pub fn share_local<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    patient: &WalletStore,
    practitioner: &WalletStore,
    claim_names: &[&str],
    ttl: Option<u64>,
    rng: &mut R,
) -> Result<VerificationReport, FlowError> {
    let cids = pick_credentials(patient, claim_names)?;
    let report = present_locally(svc, patient, practitioner, &cids, claim_names, ttl, rng)?;
    svc.step(&practitioner.owner, "verify_vp", report_line(&report));
    Ok(report)
}

/// Remote sharing: the patient hosts the presentation on the cloud agent,
/// grants the practitioner access for `ttl` ticks and tells them where it
/// is; the practitioner fetches and verifies it.
pub fn share_cloud<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    patient: &mut WalletStore,
    practitioner: &mut WalletStore,
    claim_names: &[&str],
    ttl: u64,
    rng: &mut R,
) -> Result<(VpId, VerificationReport), FlowError> {
    let cids = pick_credentials(patient, claim_names)?;
    let p_alias = link(patient, practitioner)?;
    let grantee = patient.connection(&p_alias).expect("linked").their_pairwise.clone();
    let owner = anywise_of(patient)?;
    let now = svc.clock.now();

    let vp = credentials::create_vp(patient, &svc.witnesses, &cids, claim_names, &grantee, Some(ttl), now, rng)?;
    let vp_id = svc.mediator.host_vp(vp, &owner)?;
    let grant = svc.mediator.grant_access(&vp_id, &owner, &grantee, ttl, now)?;
    svc.step(&patient.owner, "host_and_grant", format!("{vp_id} until {}", grant.expires_at));
    svc.send(patient, &p_alias, &Message::VpShared { vp_id, expires_at: grant.expires_at }, rng)?;

    let d_alias = link(practitioner, patient)?;
    let Message::VpShared { vp_id: shared, .. } = svc.receive_on(practitioner, &d_alias)? else {
        return Err(FlowError::UnexpectedMessage("vp_shared"));
    };
    let report = fetch_shared(svc, practitioner, patient, &shared)?;
    Ok((shared, report))
}

/// The practitioner fetches a hosted presentation and verifies it.
pub fn fetch_shared(
    svc: &Services,
    practitioner: &WalletStore,
    patient: &WalletStore,
    vp_id: &VpId,
) -> Result<VerificationReport, FlowError> {
    let d_alias = link(practitioner, patient)?;
    let me = practitioner.connection(&d_alias).expect("linked").my_pairwise.clone();
    let now = svc.clock.now();
    let fetched = svc.mediator.fetch_vp(vp_id, &me, now);
    svc.step(&practitioner.owner, "fetch_vp", fetched.as_ref().map_or_else(|e| e.to_string(), |_| "ok".into()));
    let vp = fetched?;
    let report = credentials::verify_vp(&vp, &svc.ledger, &me, now);
    svc.step(&practitioner.owner, "verify_vp", report_line(&report));
    Ok(report)
}

/// Ends the practitioner's access to a hosted presentation; with `remove`
/// the presentation itself is deleted from the cloud agent.
pub fn revoke_access(
    svc: &Services,
    patient: &WalletStore,
    practitioner: &WalletStore,
    vp_id: &VpId,
    remove: bool,
) -> Result<(), FlowError> {
    let p_alias = link(patient, practitioner)?;
    let grantee = patient.connection(&p_alias).expect("linked").their_pairwise.clone();
    let owner = anywise_of(patient)?;
    svc.mediator.revoke_access(vp_id, &owner, &grantee, svc.clock.now())?;
    svc.step(&patient.owner, "revoke_access", short(&grantee));
    if remove {
        svc.mediator.remove_vp(vp_id, &owner)?;
        svc.step(&patient.owner, "remove_vp", vp_id);
    }
    Ok(())
}

/// The issuer drops `cid` from its registry and anchors the new state.
pub fn revoke_credential(svc: &Services, issuer: &mut WalletStore, cid: &Cid) -> Result<(), FlowError> {
    require_onboarded(issuer)?;
    let identity = issuer.ledger_identity().cloned().expect("onboarded");
    let (_, key) = issuer.anywise_key().expect("onboarded");
    let registry = issuer.registry_mut().ok_or(CredentialError::RegistryUnavailable)?;
    let state = registry.revoke_credential(*cid, &key, &LedgerAnchor { ledger: &svc.ledger, identity: &identity })?;
    svc.witnesses.publish(registry);
    svc.step(&issuer.owner, "revoke_vc", format!("{cid} epoch {}", state.epoch));
    Ok(())
}
