use rand::{CryptoRng, RngCore};
use serde::Serialize;

use super::{anywise_of, short, FlowError, Services};
use crate::agents::{Connection, Message, WalletStore, Challenge};
use crate::codec;
use crate::crypto;
use crate::identity::{self, Did, DidSource};
use crate::ledger::{Authorization, CertificateRequest, LedgerAnchor, Role};
use crate::revocation;

/// Registration: anywise DID, certificate from the CA, channel assignment
/// from the MSP, and the DID written to the ledger. Issuing roles also get
/// an anchored revocation registry.
pub fn onboard<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    wallet: &mut WalletStore,
    role_claim: &str,
    identity_handle: &str,
    rng: &mut R,
) -> Result<Authorization, FlowError> {
    let now = svc.clock.now();
    let anywise = wallet.ensure_anywise(&svc.mediator, now, rng)?;
    svc.step(&wallet.owner, "create_anywise_did", short(&anywise.did));
    let key = wallet.key_for(&anywise.did).cloned().ok_or_else(|| FlowError::NotOnboarded(wallet.owner.clone()))?;

    let csr = CertificateRequest::new(&key, &anywise.doc, role_claim, identity_handle)?;
    let cert = svc.ca.ca_issue_certificate(&csr, now)?;
    svc.step("ca", "issue_certificate", format!("serial {} role {}", cert.serial, cert.role_claim));
    let auth = svc.msp.msp_authorize(&cert, now)?;
    let channels: Vec<&str> = auth.channels.iter().map(|c| c.as_str()).collect();
    svc.step("msp", "authorize", format!("{} [{}]", auth.role, channels.join(",")));

    svc.ledger.put_did(&auth.identity, &anywise.doc)?;
    svc.step(&wallet.owner, "put_did", "ok");
    wallet.set_membership(cert, auth.clone());

    if matches!(auth.role, Role::Practitioner | Role::Laboratory) && wallet.registry().is_none() {
        let anchor = LedgerAnchor { ledger: &svc.ledger, identity: &auth.identity };
        let (registry, _) = revocation::init_registry(anywise.did.clone(), &key, &anchor, rng)?;
        svc.witnesses.publish(&registry);
        svc.step(&wallet.owner, "init_registry", format!("epoch {}", registry.epoch));
        wallet.set_registry(registry);
    }
    Ok(auth)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConnectOptions {
    /// Whether the responder, in turn, authenticates the inviter. The inviter
    /// always authenticates the responder. When off, the inviter's anywise
    /// DID is never sent.
    pub authenticate_responder: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectionPair {
    pub inviter_alias: String,
    pub responder_alias: String,
}

#[derive(Serialize)]
struct ChallengeInput<'a> {
    challenge: &'a Challenge,
    prover: &'a Did,
    verifier: &'a Did,
}

fn challenge_bytes(challenge: &Challenge, prover: &Did, verifier: &Did) -> Vec<u8> {
    codec::to_canonical_vec(&ChallengeInput { challenge, prover, verifier })
}

/// `verifier` sends a fresh challenge over the connection; `prover` answers
/// with its anywise DID and a signature under the anywise key; the verifier
/// checks the signature against the key registered on the ledger.
fn authenticate<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    verifier: &mut WalletStore,
    verifier_alias: &str,
    prover: &mut WalletStore,
    prover_alias: &str,
    rng: &mut R,
) -> Result<Did, FlowError> {
    let challenge = Challenge::random(rng);
    svc.send(verifier, verifier_alias, &Message::AuthChallenge { challenge }, rng)?;
    svc.step(&verifier.owner, "send_challenge", "ok");

    let Message::AuthChallenge { challenge: got } = svc.receive_on(prover, prover_alias)? else {
        return Err(FlowError::UnexpectedMessage("auth_challenge"));
    };
    let conn = prover.connection(prover_alias).cloned().expect("connection exists");
    let (anywise_did, key) = prover.anywise_key().ok_or_else(|| FlowError::NotOnboarded(prover.owner.clone()))?;
    let signature = key.sign(&challenge_bytes(&got, &conn.my_pairwise, &conn.their_pairwise))?;
    svc.send(prover, prover_alias, &Message::AuthResponse { anywise_did, signature }, rng)?;
    svc.step(&prover.owner, "answer_challenge", "ok");

    let Message::AuthResponse { anywise_did, signature } = svc.receive_on(verifier, verifier_alias)? else {
        return Err(FlowError::UnexpectedMessage("auth_response"));
    };
    let conn = verifier.connection(verifier_alias).cloned().expect("connection exists");
    let doc = identity::resolve_did(&anywise_did, DidSource::Ledger(&svc.ledger)).map_err(|_| FlowError::ChallengeFailure)?;
    let msg = challenge_bytes(&challenge, &conn.their_pairwise, &conn.my_pairwise);
    if !anywise_did.is_anywise() || !crypto::verify(&doc.verification_key, &msg, &signature) {
        svc.step(&verifier.owner, "verify_challenge", "failed");
        return Err(FlowError::ChallengeFailure);
    }
    if let Some(c) = verifier.connection_mut(verifier_alias) {
        c.authenticated_peer = true;
        c.their_anywise = Some(anywise_did.clone());
    }
    svc.step(&verifier.owner, "verify_challenge", short(&anywise_did));
    Ok(anywise_did)
}

/// The QR handshake. The inviter shows an invitation carrying a fresh
/// pairwise DID; the responder answers through the mediator with its own;
/// then the inviter authenticates the responder's anywise identity.
#[allow(clippy::too_many_arguments)]
pub fn connect<R: RngCore + CryptoRng + ?Sized>(
    svc: &Services,
    inviter: &mut WalletStore,
    responder: &mut WalletStore,
    inviter_alias: &str,
    responder_alias: &str,
    options: ConnectOptions,
    rng: &mut R,
) -> Result<ConnectionPair, FlowError> {
    let now = svc.clock.now();
    let invitation = identity::make_invitation(inviter, &svc.mediator, inviter_alias, now, rng)?;
    let qr = invitation.to_bytes();
    svc.step(&inviter.owner, "make_invitation", inviter_alias);

    let parsed = identity::parse_invitation(&qr)?;
    if responder.alias_in_use(responder_alias) {
        return Err(identity::IdentityError::DuplicateAlias(responder_alias.to_string()).into());
    }
    let (my_did, _) = responder.mint_pairwise(responder_alias, &svc.mediator, now, rng)?;
    responder.insert_connection(
        responder_alias,
        Connection {
            my_pairwise: my_did,
            their_pairwise: parsed.inviter_pairwise_did.clone(),
            their_doc: parsed.inviter_doc.clone(),
            authenticated_peer: false,
            their_anywise: None,
            send_seq: 0,
            last_recv_seq: 0,
        },
    );
    svc.send(responder, responder_alias, &Message::ConnectionRequest { nonce: parsed.nonce }, rng)?;
    svc.step(&responder.owner, "scan_and_request", responder_alias);

    let result = (|| {
        let (alias, msg) = svc.receive(inviter, &invitation.inviter_pairwise_did, true)?;
        match msg {
            Message::ConnectionRequest { nonce } if nonce == invitation.nonce && alias == inviter_alias => {}
            _ => return Err(FlowError::UnexpectedMessage("connection_request")),
        }
        svc.step(&inviter.owner, "accept_request", inviter_alias);

        authenticate(svc, inviter, inviter_alias, responder, responder_alias, rng)?;
        if options.authenticate_responder {
            authenticate(svc, responder, responder_alias, inviter, inviter_alias, rng)?;
        }
        Ok(())
    })();

    if let Err(e) = result {
        inviter.remove_connection(inviter_alias);
        responder.remove_connection(responder_alias);
        svc.step("flow", "discard_connection", "both sides");
        return Err(e);
    }
    Ok(ConnectionPair { inviter_alias: inviter_alias.to_string(), responder_alias: responder_alias.to_string() })
}

/// Checks a role certificate is still usable; used before issuing.
pub(crate) fn require_onboarded(w: &WalletStore) -> Result<Did, FlowError> {
    if w.ledger_identity().is_none() {
        return Err(FlowError::NotOnboarded(w.owner.clone()));
    }
    anywise_of(w)
}
