//! Issuer-side revocation registry: a sorted Merkle set over the ids of
//! active credentials. Only the signed root is published, so the anchored
//! state has the same size whatever the number of credentials.
//!
//! Tree rules: `leaf = H(0x00 ‖ cid)`, `node = H(0x01 ‖ left ‖ right)`, a
//! level with an odd number of nodes duplicates its last node, and the empty
//! set hashes to `H("EMPTY_REGISTRY")`.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::codec::{self, b58_bytes};
use crate::crypto::{self, Digest, KeyPair, PublicKey, Signature};
use crate::identity::Did;

b58_bytes!(
    /// Random 16-byte credential identifier.
    Cid,
    16
);
b58_bytes!(RegistryId, 16);

pub const EMPTY_MARKER: &[u8] = b"EMPTY_REGISTRY";
const LEAF_TAG: u8 = 0x00;
const NODE_TAG: u8 = 0x01;

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
pub enum RevocationError {
    #[error("credential {0} already registered")]
    DuplicateCid(Cid),
    #[error("credential {0} is not active")]
    UnknownCid(Cid),
    #[error("issuer key cannot sign: {0}")]
    Signing(#[from] crypto::CryptoError),
    #[error("anchoring failed: {0}")]
    Anchor(String),
}

pub fn empty_root() -> Digest {
    crypto::hash(EMPTY_MARKER)
}

pub fn leaf_hash(cid: &Cid) -> Digest {
    crypto::hash_parts(&[&[LEAF_TAG], &cid.0])
}

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    crypto::hash_parts(&[&[NODE_TAG], &left.bytes, &right.bytes])
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => node_hash(l, r),
            [last] => node_hash(last, last),
            _ => unreachable!(),
        })
        .collect()
}

/// Root over leaf digests already in sorted-cid order.
pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return empty_root();
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    level[0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// One sibling on the way to the root, tagged with the side it sits on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub sibling: Digest,
    pub side: Side,
}

pub fn merkle_path(leaves: &[Digest], mut index: usize) -> Vec<PathStep> {
    let mut path = Vec::new();
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        let (sibling, side) = if index % 2 == 0 {
            (*level.get(index + 1).unwrap_or(&level[index]), Side::Right)
        } else {
            (level[index - 1], Side::Left)
        };
        path.push(PathStep { sibling, side });
        level = next_level(&level);
        index /= 2;
    }
    path
}

pub fn fold_path(leaf: Digest, path: &[PathStep]) -> Digest {
    path.iter().fold(leaf, |acc, step| match step.side {
        Side::Left => node_hash(&step.sibling, &acc),
        Side::Right => node_hash(&acc, &step.sibling),
    })
}

/// Paths for every leaf at once, building each level a single time.
pub fn merkle_paths(leaves: &[Digest]) -> Vec<Vec<PathStep>> {
    let mut paths = vec![Vec::new(); leaves.len()];
    let mut level = leaves.to_vec();
    let mut index: Vec<usize> = (0..leaves.len()).collect();
    while level.len() > 1 {
        for (path, i) in paths.iter_mut().zip(index.iter_mut()) {
            let step = if *i % 2 == 0 {
                PathStep { sibling: *level.get(*i + 1).unwrap_or(&level[*i]), side: Side::Right }
            } else {
                PathStep { sibling: level[*i - 1], side: Side::Left }
            };
            path.push(step);
            *i /= 2;
        }
        level = next_level(&level);
    }
    paths
}

/// Signed, constant-size snapshot of a registry at one epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryState {
    pub registry_id: RegistryId,
    pub issuer_did: Did,
    pub epoch: u64,
    pub root: Digest,
    pub issuer_signature: Signature,
}

#[derive(Serialize)]
struct StateSigningInput<'a> {
    registry_id: &'a RegistryId,
    epoch: u64,
    root: &'a Digest,
}

impl RegistryState {
    pub fn signing_bytes(registry_id: &RegistryId, epoch: u64, root: &Digest) -> Vec<u8> {
        codec::to_canonical_vec(&StateSigningInput { registry_id, epoch, root })
    }

    pub fn verify_signature(&self, issuer_key: &PublicKey) -> bool {
        let msg = Self::signing_bytes(&self.registry_id, self.epoch, &self.root);
        crypto::verify(issuer_key, &msg, &self.issuer_signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonRevocationProof {
    pub cid: Cid,
    pub registry_id: RegistryId,
    pub epoch: u64,
    pub merkle_path: Vec<PathStep>,
}

/// Publishes signed states; the ledger-backed implementation lives in
/// [`crate::ledger::LedgerAnchor`].
pub trait StateAnchor {
    fn anchor(&self, state: &RegistryState) -> Result<(), String>;
}

/// Discards states. Useful where only the registry arithmetic matters.
pub struct Unanchored;

impl StateAnchor for Unanchored {
    fn anchor(&self, _state: &RegistryState) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationRegistry {
    pub registry_id: RegistryId,
    pub issuer_did: Did,
    pub epoch: u64,
    /// Active cids in sorted order, each with its cached leaf digest.
    active: BTreeMap<Cid, Digest>,
}

impl RevocationRegistry {
    pub fn active_cids(&self) -> impl Iterator<Item = &Cid> {
        self.active.keys()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn contains(&self, cid: &Cid) -> bool {
        self.active.contains_key(cid)
    }

    fn leaves(&self) -> Vec<Digest> {
        self.active.values().copied().collect()
    }

    pub fn root(&self) -> Digest {
        merkle_root(&self.leaves())
    }

    pub fn signed_state(&self, issuer_key: &KeyPair) -> Result<RegistryState, RevocationError> {
        let root = self.root();
        let sig = issuer_key.sign(&RegistryState::signing_bytes(&self.registry_id, self.epoch, &root))?;
        Ok(RegistryState {
            registry_id: self.registry_id,
            issuer_did: self.issuer_did.clone(),
            epoch: self.epoch,
            root,
            issuer_signature: sig,
        })
    }

    /// Signs and anchors the current state; on failure `undo` restores the
    /// previous set so the registry never runs ahead of what is published.
    fn publish(
        &mut self,
        issuer_key: &KeyPair,
        anchor: &dyn StateAnchor,
        undo: impl FnOnce(&mut Self),
    ) -> Result<RegistryState, RevocationError> {
        let published = self
            .signed_state(issuer_key)
            .and_then(|state| anchor.anchor(&state).map(|_| state).map_err(RevocationError::Anchor));
        if published.is_err() {
            undo(self);
        }
        published
    }

    pub fn register_credential(
        &mut self,
        cid: Cid,
        issuer_key: &KeyPair,
        anchor: &dyn StateAnchor,
    ) -> Result<RegistryState, RevocationError> {
        if self.active.contains_key(&cid) {
            return Err(RevocationError::DuplicateCid(cid));
        }
        self.active.insert(cid, leaf_hash(&cid));
        self.epoch += 1;
        self.publish(issuer_key, anchor, |reg| {
            reg.active.remove(&cid);
            reg.epoch -= 1;
        })
    }

    pub fn revoke_credential(
        &mut self,
        cid: Cid,
        issuer_key: &KeyPair,
        anchor: &dyn StateAnchor,
    ) -> Result<RegistryState, RevocationError> {
        let Some(leaf) = self.active.remove(&cid) else {
            return Err(RevocationError::UnknownCid(cid));
        };
        self.epoch += 1;
        self.publish(issuer_key, anchor, |reg| {
            reg.active.insert(cid, leaf);
            reg.epoch -= 1;
        })
    }

    pub fn prove_non_revocation(&self, cid: &Cid) -> Result<NonRevocationProof, RevocationError> {
        let index = self
            .active
            .keys()
            .position(|c| c == cid)
            .ok_or(RevocationError::UnknownCid(*cid))?;
        Ok(NonRevocationProof {
            cid: *cid,
            registry_id: self.registry_id,
            epoch: self.epoch,
            merkle_path: merkle_path(&self.leaves(), index),
        })
    }

    /// Proofs for every active credential, in cid order.
    pub fn prove_all(&self) -> Vec<NonRevocationProof> {
        self.active
            .keys()
            .zip(merkle_paths(&self.leaves()))
            .map(|(cid, merkle_path)| NonRevocationProof {
                cid: *cid,
                registry_id: self.registry_id,
                epoch: self.epoch,
                merkle_path,
            })
            .collect()
    }
}

/// Creates an empty registry at epoch 0 and anchors its state.
pub fn init_registry<R: RngCore + CryptoRng + ?Sized>(
    issuer_did: Did,
    issuer_key: &KeyPair,
    anchor: &dyn StateAnchor,
    rng: &mut R,
) -> Result<(RevocationRegistry, RegistryState), RevocationError> {
    let registry = RevocationRegistry {
        registry_id: RegistryId::random(rng),
        issuer_did,
        epoch: 0,
        active: BTreeMap::new(),
    };
    let state = registry.signed_state(issuer_key)?;
    anchor.anchor(&state).map_err(RevocationError::Anchor)?;
    Ok((registry, state))
}

/// True iff `proof` folds to `state.root` for the same registry and epoch.
/// The caller is responsible for checking `state`'s signature.
pub fn verify_non_revocation(proof: &NonRevocationProof, state: &RegistryState) -> bool {
    proof.registry_id == state.registry_id
        && proof.epoch == state.epoch
        && fold_path(leaf_hash(&proof.cid), &proof.merkle_path) == state.root
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{create_did, DidKind};
    use crate::clock::Timestamp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup() -> (RevocationRegistry, KeyPair, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let key = crypto::generate_keypair(&mut rng);
        let (did, _) = create_did(DidKind::Anywise, &key, "m", Timestamp(0)).unwrap();
        let (reg, state) = init_registry(did, &key, &Unanchored, &mut rng).unwrap();
        assert_eq!(state.root, empty_root());
        assert_eq!(state.epoch, 0);
        (reg, key, rng)
    }

    #[test]
    fn empty_registry_root_is_marker_hash() {
        assert_eq!(
            empty_root().to_hex(),
            crypto::hash(b"EMPTY_REGISTRY").to_hex()
        );
    }

    #[test]
    fn init_twice_gives_distinct_ids() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let key = crypto::generate_keypair(&mut rng);
        let (did, _) = create_did(DidKind::Anywise, &key, "m", Timestamp(0)).unwrap();
        let (a, _) = init_registry(did.clone(), &key, &Unanchored, &mut rng).unwrap();
        let (b, _) = init_registry(did, &key, &Unanchored, &mut rng).unwrap();
        assert_ne!(a.registry_id, b.registry_id);
    }

    #[test]
    fn single_member_root_is_its_leaf() {
        let (mut reg, key, mut rng) = setup();
        let c1 = Cid::random(&mut rng);
        let state = reg.register_credential(c1, &key, &Unanchored).unwrap();
        let mut material = vec![0x00];
        material.extend_from_slice(&c1.0);
        assert_eq!(state.root, crypto::hash(&material));
        assert_eq!(state.epoch, 1);
        assert!(state.verify_signature(&key.public_key));
    }

    #[test]
    fn root_is_independent_of_insertion_order() {
        let (mut a, key, mut rng) = setup();
        let (mut b, _, _) = setup();
        let c1 = Cid::random(&mut rng);
        let c2 = Cid::random(&mut rng);
        a.register_credential(c1, &key, &Unanchored).unwrap();
        a.register_credential(c2, &key, &Unanchored).unwrap();
        b.register_credential(c2, &key, &Unanchored).unwrap();
        b.register_credential(c1, &key, &Unanchored).unwrap();
        assert_eq!(a.root(), b.root());
    }

    #[test]
    fn duplicate_and_unknown_cids() {
        let (mut reg, key, mut rng) = setup();
        let c = Cid::random(&mut rng);
        reg.register_credential(c, &key, &Unanchored).unwrap();
        assert_eq!(reg.register_credential(c, &key, &Unanchored), Err(RevocationError::DuplicateCid(c)));
        let other = Cid::random(&mut rng);
        assert_eq!(reg.revoke_credential(other, &key, &Unanchored), Err(RevocationError::UnknownCid(other)));
        assert_eq!(reg.prove_non_revocation(&other), Err(RevocationError::UnknownCid(other)));
        assert_eq!(reg.epoch, 1);
    }

    #[test]
    fn revoking_sole_member_restores_empty_root() {
        let (mut reg, key, mut rng) = setup();
        let c = Cid::random(&mut rng);
        reg.register_credential(c, &key, &Unanchored).unwrap();
        let state = reg.revoke_credential(c, &key, &Unanchored).unwrap();
        assert_eq!(state.root, empty_root());
        assert_eq!(state.epoch, 2);
    }

    #[test]
    fn remaining_member_still_proves_after_revocation() {
        let (mut reg, key, mut rng) = setup();
        let c1 = Cid::random(&mut rng);
        let c2 = Cid::random(&mut rng);
        reg.register_credential(c1, &key, &Unanchored).unwrap();
        let before = reg.register_credential(c2, &key, &Unanchored).unwrap();
        let old_proof = reg.prove_non_revocation(&c1).unwrap();
        assert!(verify_non_revocation(&old_proof, &before));
        let after = reg.revoke_credential(c1, &key, &Unanchored).unwrap();
        assert!(!verify_non_revocation(&old_proof, &after));
        let proof = reg.prove_non_revocation(&c2).unwrap();
        assert!(verify_non_revocation(&proof, &after));
        // a proof from the new epoch does not verify against the stale state
        assert!(!verify_non_revocation(&proof, &before));
    }

    #[test]
    fn failed_anchor_rolls_back() {
        struct Refuse;
        impl StateAnchor for Refuse {
            fn anchor(&self, _: &RegistryState) -> Result<(), String> {
                Err("ledger down".into())
            }
        }
        let (mut reg, key, mut rng) = setup();
        let c = Cid::random(&mut rng);
        assert!(matches!(reg.register_credential(c, &key, &Refuse), Err(RevocationError::Anchor(_))));
        assert!(!reg.contains(&c));
        assert_eq!(reg.epoch, 0);
    }

    #[test]
    fn flipped_sibling_fails() {
        let (mut reg, key, mut rng) = setup();
        let cids: Vec<Cid> = (0..5).map(|_| Cid::random(&mut rng)).collect();
        let mut state = None;
        for c in &cids {
            state = Some(reg.register_credential(*c, &key, &Unanchored).unwrap());
        }
        let state = state.unwrap();
        let mut proof = reg.prove_non_revocation(&cids[2]).unwrap();
        assert!(verify_non_revocation(&proof, &state));
        proof.merkle_path[1].sibling.bytes[0] ^= 1;
        assert!(!verify_non_revocation(&proof, &state));
    }
}
