mod common;

use ed25519_dalek::{Signature as EdSignature, Verifier, VerifyingKey};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use common::{connect, issue, world};
use ssi_core::clock::Timestamp;
use ssi_core::credentials::{issue_vc, verify_vc, Claim, LedgerView, VerifiableCredential};
use ssi_core::harness::World;
use ssi_core::ledger::Role;

const GOLDEN: &str = include_str!("fixtures/golden_vc.json");

fn golden_vc() -> (World, VerifiableCredential) {
    let mut w = world(2024, &[("doc", Role::Practitioner), ("pat", Role::Patient)]);
    let subject = w.wallet("pat").unwrap().anywise_did().unwrap().clone();
    let mut doc = w.wallet("doc").unwrap().clone();
    let vc = issue_vc(&mut doc, &w.svc.ledger, &subject, &[("drug", "metformin"), ("dose", "500mg")], Timestamp(7), &mut w.rng).unwrap();
    *w.wallet_mut("doc").unwrap() = doc;
    w.svc.witnesses.publish(w.wallet("doc").unwrap().registry().unwrap());
    (w, vc)
}

#[test]
fn credential_bytes_match_golden_fixture() {
    let (_, vc) = golden_vc();
    assert_eq!(String::from_utf8(vc.to_canonical_bytes()).unwrap(), GOLDEN.trim_end());
}

#[test]
fn golden_credential_checks_out_by_hand() {
    let (w, vc) = golden_vc();
    for (claim, digest) in vc.claims.iter().zip(&vc.envelope.claim_digests) {
        let mut h = Sha256::new();
        h.update(claim.name.as_bytes());
        h.update([0x1F]);
        h.update(claim.value.as_bytes());
        h.update([0x1F]);
        h.update(claim.salt.as_bytes());
        assert_eq!(h.finalize().as_slice(), &digest.bytes);
    }
    let key = VerifyingKey::from_bytes(&vc.envelope.issuer_key.0).unwrap();
    let sig = EdSignature::from_bytes(&vc.envelope.signature.0);
    key.verify(&vc.envelope.signing_bytes(), &sig).unwrap();

    let report = verify_vc(&vc, LedgerView { ledger: &w.svc.ledger, witnesses: &w.svc.witnesses });
    assert!(report.signature_ok && report.issuer_known && report.not_revoked == Some(true), "{report:?}");
}

#[test]
fn duplicate_claim_names_are_rejected() {
    let mut w = world(3, &[("doc", Role::Practitioner)]);
    let subject = w.wallet("doc").unwrap().anywise_did().unwrap().clone();
    let mut doc = w.wallet("doc").unwrap().clone();
    assert!(issue_vc(&mut doc, &w.svc.ledger, &subject, &[("a", "1"), ("a", "2")], Timestamp(0), &mut w.rng).is_err());
}

#[test]
fn unregistered_issuer_is_flagged() {
    let (_, vc) = golden_vc();
    let other = world(99, &[]);
    let report = verify_vc(&vc, LedgerView { ledger: &other.svc.ledger, witnesses: &other.svc.witnesses });
    assert!(report.signature_ok);
    assert!(!report.issuer_known);
    assert!(!report.is_valid());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_claim_edit_breaks_the_credential(seed: u64, value in "[a-zA-Z0-9 ]{1,20}", which: bool, bit in 0u8..8) {
        let mut w = world(seed, &[("doc", Role::Practitioner), ("pat", Role::Patient)]);
        connect(&mut w, "doc", "pat");
        let cid = issue(&mut w, "doc", "pat", &[("a", &value), ("b", "fixed")]);
        let view = LedgerView { ledger: &w.svc.ledger, witnesses: &w.svc.witnesses };
        let vc = w.wallet("pat").unwrap().credential(&cid).unwrap().clone();
        prop_assert!(verify_vc(&vc, view).is_valid());

        let mut edited = vc.clone();
        let k = usize::from(which);
        if bit % 2 == 0 {
            edited.claims[k].value.push('!');
        } else {
            edited.claims[k].salt.0[0] ^= 1 << bit;
        }
        prop_assert!(!verify_vc(&edited, view).signature_ok);

        let mut swapped = vc.clone();
        swapped.claims.swap(0, 1);
        prop_assert!(!verify_vc(&swapped, view).signature_ok);

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut extra = vc;
        extra.claims.push(Claim::new("c", "x", &mut rng));
        prop_assert!(!verify_vc(&extra, view).signature_ok);
    }
}
