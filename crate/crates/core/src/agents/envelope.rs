//! Authenticated, encrypted messages between the two ends of a pairwise
//! connection.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::wallet::{Connection, WalletStore};
use super::AgentError;
use crate::codec::{self, b58_bytes, b58_vec};
use crate::credentials::{VerifiableCredential, VerifiablePresentation, VpId};
use crate::crypto::{self, AeadCiphertext, Signature};
use crate::identity::{Did, DidDocument, InviteNonce};
use crate::clock::Timestamp;

const ENVELOPE_CONTEXT: &[u8] = b"ssi/envelope/v1";

b58_bytes!(Challenge, 32);

/// Application messages carried inside envelopes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    ConnectionRequest { nonce: InviteNonce },
    AuthChallenge { challenge: Challenge },
    AuthResponse { anywise_did: Did, signature: Signature },
    SubjectRequest,
    SubjectInfo { subject_did: Did },
    Credential { vc: VerifiableCredential },
    Presentation { vp: VerifiablePresentation },
    VpShared { vp_id: VpId, expires_at: Timestamp },
    ContactRequest {
        patient_did: Did,
        #[serde(with = "b58_vec")]
        share: Vec<u8>,
    },
    ContactInvite { patient_did: Did },
    ContactAccept { contact_did: Did },
    Text { body: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: Did,
    pub to: Did,
    pub seq: u64,
    pub body: AeadCiphertext,
    pub sender_signature: Signature,
    /// Sender's pairwise document, attached to the first message of a
    /// connection so the inviter learns it.
    pub from_doc: Option<DidDocument>,
}

#[derive(Serialize)]
struct Header<'a> {
    from: &'a Did,
    to: &'a Did,
    seq: u64,
}

#[derive(Serialize)]
struct Signed<'a> {
    from: &'a Did,
    to: &'a Did,
    seq: u64,
    body: &'a AeadCiphertext,
}

impl Envelope {
    fn signing_bytes(&self) -> Vec<u8> {
        codec::to_canonical_vec(&Signed { from: &self.from, to: &self.to, seq: self.seq, body: &self.body })
    }
}

fn channel_key(wallet: &WalletStore, conn: &Connection) -> Result<[u8; 32], AgentError> {
    let mine = wallet.key_for(&conn.my_pairwise).ok_or(AgentError::Missing("pairwise key"))?;
    Ok(crypto::agree_static(mine, &conn.their_doc.verification_key, ENVELOPE_CONTEXT)?)
}

pub fn pack_envelope<R: RngCore + CryptoRng + ?Sized>(
    wallet: &mut WalletStore,
    connection_alias: &str,
    message: &Message,
    rng: &mut R,
) -> Result<Envelope, AgentError> {
    let conn = wallet
        .connection(connection_alias)
        .cloned()
        .ok_or_else(|| AgentError::UnknownConnection(connection_alias.to_string()))?;
    let key = channel_key(wallet, &conn)?;
    let seq = conn.send_seq + 1;
    let aad = codec::to_canonical_vec(&Header { from: &conn.my_pairwise, to: &conn.their_pairwise, seq });
    let body = crypto::aead_encrypt(&key, &codec::to_canonical_vec(message), &aad, rng)?;
    let from_doc = (seq == 1).then(|| wallet.stored_document_of(&conn.my_pairwise)).flatten();
    let mut env = Envelope {
        from: conn.my_pairwise.clone(),
        to: conn.their_pairwise.clone(),
        seq,
        body,
        sender_signature: Signature([0; 64]),
        from_doc,
    };
    let signer = wallet.key_for(&conn.my_pairwise).ok_or(AgentError::Missing("pairwise key"))?;
    env.sender_signature = signer.sign(&env.signing_bytes())?;
    if let Some(c) = wallet.connection_mut(connection_alias) {
        c.send_seq = seq;
    }
    Ok(env)
}

/// Verifies, decrypts and accepts `env`, returning the connection alias it
/// arrived on and the message.
pub fn unpack_envelope(wallet: &mut WalletStore, env: &Envelope) -> Result<(String, Message), AgentError> {
    let alias = wallet
        .connection_alias_for(&env.to, &env.from)
        .ok_or_else(|| AgentError::UnknownConnection(env.from.to_string()))?;
    let conn = wallet.connection(&alias).cloned().expect("alias just found");
    if !crypto::verify(&conn.their_doc.verification_key, &env.signing_bytes(), &env.sender_signature) {
        return Err(AgentError::AuthenticationFailure);
    }
    if env.seq <= conn.last_recv_seq {
        return Err(AgentError::Replay { last: conn.last_recv_seq, got: env.seq });
    }
    let key = channel_key(wallet, &conn)?;
    let aad = codec::to_canonical_vec(&Header { from: &env.from, to: &env.to, seq: env.seq });
    let plain = crypto::aead_decrypt(&key, &env.body, &aad).map_err(|_| AgentError::AuthenticationFailure)?;
    let message = codec::from_json_slice(&plain).map_err(|e| AgentError::Malformed(e.to_string()))?;
    if let Some(c) = wallet.connection_mut(&alias) {
        c.last_recv_seq = env.seq;
    }
    Ok((alias, message))
}

/// Inviter side of the handshake: `env` answers one of our invitations and
/// carries the responder's pairwise document. Creates the connection under
/// the invitation's alias and then unpacks as usual.
pub fn accept_first_contact(wallet: &mut WalletStore, env: &Envelope) -> Result<(String, Message), AgentError> {
    let alias = wallet
        .alias_of(&env.to)
        .map(str::to_string)
        .ok_or_else(|| AgentError::UnknownConnection(env.to.to_string()))?;
    if wallet.connection(&alias).is_none() {
        let doc = env.from_doc.clone().ok_or(AgentError::AuthenticationFailure)?;
        doc.check_binding(&env.from)?;
        wallet.insert_connection(
            &alias,
            Connection {
                my_pairwise: env.to.clone(),
                their_pairwise: env.from.clone(),
                their_doc: doc,
                authenticated_peer: false,
                their_anywise: None,
                send_seq: 0,
                last_recv_seq: 0,
            },
        );
    }
    match unpack_envelope(wallet, env) {
        Ok(out) => Ok(out),
        Err(e) => {
            wallet.remove_connection_only(&alias);
            Err(e)
        }
    }
}
