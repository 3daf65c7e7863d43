//! Signatures, hashing, authenticated encryption and 2-of-2 key sharing.
//!
//! Signing keys are Ed25519 (deterministic, 64-byte signatures). Bulk
//! encryption is XChaCha20-Poly1305 with a random 24-byte nonce. Sealing to a
//! public key uses an ephemeral X25519 agreement to wrap a fresh content key.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::codec::{b58_bytes, b58_vec};

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 24;
pub const TAG_LEN: usize = 16;

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("entropy source unavailable")]
    EntropyUnavailable,
    #[error("malformed key: {0}")]
    MalformedKey(&'static str),
    #[error("invalid key length: expected {expected}, got {actual}")]
    InvalidKeyLength { expected: usize, actual: usize },
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("share length mismatch: {0} vs {1}")]
    ShareLengthMismatch(usize, usize),
}

b58_bytes!(
    /// 32-byte public key (Ed25519 verification key or X25519 public value).
    PublicKey,
    32
);
b58_bytes!(
    /// 32-byte secret: an Ed25519 seed or an X25519 static secret.
    SecretKey,
    32
);
b58_bytes!(Signature, 64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ed25519,
    X25519,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPair {
    pub public_key: PublicKey,
    pub private_key: SecretKey,
    pub scheme_id: Scheme,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key", &self.public_key)
            .field("scheme_id", &self.scheme_id)
            .finish_non_exhaustive()
    }
}

/// Generates a fresh Ed25519 signing pair.
pub fn generate_keypair<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> KeyPair {
    let mut seed = [0u8; KEY_LEN];
    rng.fill_bytes(&mut seed);
    keypair_from_seed(seed)
}

/// Like [`generate_keypair`] but draws from the operating system, surfacing
/// entropy failures instead of panicking.
pub fn generate_keypair_os() -> Result<KeyPair, CryptoError> {
    let mut seed = [0u8; KEY_LEN];
    rand::rngs::OsRng
        .try_fill_bytes(&mut seed)
        .map_err(|_| CryptoError::EntropyUnavailable)?;
    Ok(keypair_from_seed(seed))
}

pub fn keypair_from_seed(seed: [u8; KEY_LEN]) -> KeyPair {
    let signing = SigningKey::from_bytes(&seed);
    KeyPair {
        public_key: PublicKey(signing.verifying_key().to_bytes()),
        private_key: SecretKey(seed),
        scheme_id: Scheme::Ed25519,
    }
}

/// Generates an X25519 pair for sealing data to its holder.
pub fn generate_encryption_keypair<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> KeyPair {
    let mut secret = [0u8; KEY_LEN];
    rng.fill_bytes(&mut secret);
    encryption_keypair_from_secret(secret)
}

/// The stored secret is a seed; the X25519 scalar is hashed from it so that
/// every bit of the seed affects the key (clamping would otherwise ignore some).
pub fn encryption_keypair_from_secret(secret: [u8; KEY_LEN]) -> KeyPair {
    let static_secret = x25519_static(&SecretKey(secret));
    let public = x25519_dalek::PublicKey::from(&static_secret);
    KeyPair {
        public_key: PublicKey(public.to_bytes()),
        private_key: SecretKey(secret),
        scheme_id: Scheme::X25519,
    }
}

impl KeyPair {
    fn signing_key(&self) -> Result<SigningKey, CryptoError> {
        if self.scheme_id != Scheme::Ed25519 {
            return Err(CryptoError::MalformedKey("not a signing key"));
        }
        Ok(SigningKey::from_bytes(&self.private_key.0))
    }

    pub fn sign(&self, message: &[u8]) -> Result<Signature, CryptoError> {
        Ok(Signature(self.signing_key()?.sign(message).to_bytes()))
    }
}

/// Signs `message` with a raw Ed25519 seed.
pub fn sign(private_key: &SecretKey, message: &[u8]) -> Signature {
    Signature(SigningKey::from_bytes(&private_key.0).sign(message).to_bytes())
}

pub fn verify(public_key: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&public_key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    key.verify(message, &sig).is_ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HashAlg {
    Sha256,
}

/// 32-byte SHA-256 output. Serialized as bare base58 since only one hash
/// algorithm is in use.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest {
    pub bytes: [u8; 32],
    pub alg_id: HashAlg,
}

impl Digest {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest { bytes, alg_id: HashAlg::Sha256 }
    }

    pub fn to_b58(&self) -> String {
        crate::codec::b58(&self.bytes)
    }

    pub fn to_hex(&self) -> String {
        self.bytes.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl std::fmt::Display for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_b58())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_b58())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let text = String::deserialize(d)?;
        let raw = crate::codec::from_b58(&text).ok_or_else(|| D::Error::custom("invalid base58"))?;
        let bytes = <[u8; 32]>::try_from(raw.as_slice())
            .map_err(|_| D::Error::custom("digest must be 32 bytes"))?;
        Ok(Digest::from_bytes(bytes))
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest::from_bytes(Sha256::digest(data).into())
}

/// Hashes the concatenation of `parts` without materializing it.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest::from_bytes(hasher.finalize().into())
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AeadCiphertext {
    #[serde(with = "b58_vec")]
    pub nonce: Vec<u8>,
    #[serde(with = "b58_vec")]
    pub body: Vec<u8>,
    #[serde(with = "b58_vec")]
    pub tag: Vec<u8>,
}

impl AeadCiphertext {
    /// `nonce ‖ body ‖ tag`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.nonce.len() + self.body.len() + self.tag.len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(CryptoError::AuthenticationFailure);
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (body, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(AeadCiphertext { nonce: nonce.to_vec(), body: body.to_vec(), tag: tag.to_vec() })
    }
}

fn aead_cipher(key: &[u8]) -> Result<XChaCha20Poly1305, CryptoError> {
    if key.len() != KEY_LEN {
        return Err(CryptoError::InvalidKeyLength { expected: KEY_LEN, actual: key.len() });
    }
    Ok(XChaCha20Poly1305::new_from_slice(key).expect("length checked"))
}

pub fn aead_encrypt<R: RngCore + CryptoRng + ?Sized>(
    key: &[u8],
    plaintext: &[u8],
    aad: &[u8],
    rng: &mut R,
) -> Result<AeadCiphertext, CryptoError> {
    let cipher = aead_cipher(key)?;
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut sealed = cipher
        .encrypt(XNonce::from_slice(&nonce), Payload { msg: plaintext, aad })
        .map_err(|_| CryptoError::AuthenticationFailure)?;
    let tag = sealed.split_off(sealed.len() - TAG_LEN);
    Ok(AeadCiphertext { nonce: nonce.to_vec(), body: sealed, tag })
}

pub fn aead_decrypt(key: &[u8], ct: &AeadCiphertext, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let cipher = aead_cipher(key)?;
    if ct.nonce.len() != NONCE_LEN || ct.tag.len() != TAG_LEN {
        return Err(CryptoError::AuthenticationFailure);
    }
    let mut sealed = Vec::with_capacity(ct.body.len() + TAG_LEN);
    sealed.extend_from_slice(&ct.body);
    sealed.extend_from_slice(&ct.tag);
    cipher
        .decrypt(XNonce::from_slice(&ct.nonce), Payload { msg: &sealed, aad })
        .map_err(|_| CryptoError::AuthenticationFailure)
}

/// Payload sealed to an X25519 public key: a fresh content key encrypts the
/// payload and is itself wrapped under a key agreed with an ephemeral pair.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SealedBox {
    pub ephemeral_public: PublicKey,
    pub wrapped_key: AeadCiphertext,
    pub payload: AeadCiphertext,
}

fn x25519_static(seed: &SecretKey) -> x25519_dalek::StaticSecret {
    x25519_dalek::StaticSecret::from(hash_parts(&[b"ssi/x25519/v1", &seed.0]).bytes)
}

fn wrap_key(shared: &[u8; 32], ephemeral: &PublicKey, recipient: &PublicKey) -> [u8; 32] {
    hash_parts(&[b"ssi/seal/v1", shared, &ephemeral.0, &recipient.0]).bytes
}

pub fn seal<R: RngCore + CryptoRng + ?Sized>(
    recipient: &PublicKey,
    plaintext: &[u8],
    aad: &[u8],
    rng: &mut R,
) -> Result<SealedBox, CryptoError> {
    let mut content_key = [0u8; KEY_LEN];
    rng.fill_bytes(&mut content_key);
    let payload = aead_encrypt(&content_key, plaintext, aad, rng)?;

    let ephemeral = generate_encryption_keypair(rng);
    let eph_secret = x25519_static(&ephemeral.private_key);
    let shared = eph_secret.diffie_hellman(&x25519_dalek::PublicKey::from(recipient.0));
    let kek = wrap_key(shared.as_bytes(), &ephemeral.public_key, recipient);
    let wrapped_key = aead_encrypt(&kek, &content_key, aad, rng)?;
    Ok(SealedBox { ephemeral_public: ephemeral.public_key, wrapped_key, payload })
}

pub fn open_sealed(recipient: &KeyPair, sealed: &SealedBox, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if recipient.scheme_id != Scheme::X25519 {
        return Err(CryptoError::MalformedKey("not an encryption key"));
    }
    let secret = x25519_static(&recipient.private_key);
    let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(sealed.ephemeral_public.0));
    let kek = wrap_key(shared.as_bytes(), &sealed.ephemeral_public, &recipient.public_key);
    let content_key = aead_decrypt(&kek, &sealed.wrapped_key, aad)?;
    aead_decrypt(&content_key, &sealed.payload, aad)
}

/// Static Diffie-Hellman between two Ed25519 identities, mapped onto
/// Curve25519, hashed with both public keys in sorted order so both sides
/// derive the same 32-byte key.
pub fn agree_static(mine: &KeyPair, theirs: &PublicKey, context: &[u8]) -> Result<[u8; 32], CryptoError> {
    let signing = mine.signing_key()?;
    let their_point = VerifyingKey::from_bytes(&theirs.0)
        .map_err(|_| CryptoError::MalformedKey("invalid peer key"))?
        .to_montgomery();
    let secret = x25519_dalek::StaticSecret::from(signing.to_scalar_bytes());
    let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(their_point.to_bytes()));
    let (lo, hi) = if mine.public_key <= *theirs {
        (&mine.public_key, theirs)
    } else {
        (theirs, &mine.public_key)
    };
    Ok(hash_parts(&[b"ssi/agree/v1", context, shared.as_bytes(), &lo.0, &hi.0]).bytes)
}

/// Two XOR shares of a key; either one alone is uniformly distributed.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct KeyShares {
    #[serde(with = "b58_vec")]
    pub share_msp: Vec<u8>,
    #[serde(with = "b58_vec")]
    pub share_contacts: Vec<u8>,
}

pub fn split_key<R: RngCore + CryptoRng + ?Sized>(secret: &[u8], rng: &mut R) -> Result<KeyShares, CryptoError> {
    if secret.len() != KEY_LEN {
        return Err(CryptoError::InvalidKeyLength { expected: KEY_LEN, actual: secret.len() });
    }
    let mut mask = vec![0u8; secret.len()];
    rng.fill_bytes(&mut mask);
    let share_contacts = secret.iter().zip(&mask).map(|(s, m)| s ^ m).collect();
    Ok(KeyShares { share_msp: mask, share_contacts })
}

pub fn combine_key(shares: &KeyShares) -> Result<Vec<u8>, CryptoError> {
    combine_parts(&shares.share_msp, &shares.share_contacts)
}

pub fn combine_parts(share_msp: &[u8], share_contacts: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if share_msp.len() != share_contacts.len() {
        return Err(CryptoError::ShareLengthMismatch(share_msp.len(), share_contacts.len()));
    }
    Ok(share_msp.iter().zip(share_contacts).map(|(a, b)| a ^ b).collect())
}
