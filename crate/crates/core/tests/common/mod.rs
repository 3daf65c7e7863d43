//! Shared fixtures, a brute-force Merkle oracle, and seeded property checks
//! used by both the property suites and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use ssi_core::agents::{AgentError, Envelope, Mediator, QueuedMessage, WalletStore};
use ssi_core::clock::{SimClock, Timestamp};
use ssi_core::credentials::{self, VerifiablePresentation};
use ssi_core::crypto::{self, Signature};
use ssi_core::flows::{self, ConnectOptions, MEDIATOR_ENDPOINT};
use ssi_core::harness::World;
use ssi_core::identity::{create_did, Did, DidKind};
use ssi_core::ledger::{Ledger, Role};
use ssi_core::revocation::Cid;

pub fn world(seed: u64, actors: &[(&str, Role)]) -> World {
    let mut w = World::new(seed);
    for (name, role) in actors {
        w.add_actor(name, *role).unwrap();
        w.onboard(name).unwrap();
    }
    w
}

pub fn connect(w: &mut World, inviter: &str, responder: &str) {
    let (ia, ra) = (format!("{inviter}->{responder}"), format!("{responder}->{inviter}"));
    w.with_pair(inviter, responder, |svc, i, r, rng| flows::connect(svc, i, r, &ia, &ra, ConnectOptions::default(), rng))
        .unwrap()
        .unwrap();
}

pub fn issue(w: &mut World, issuer: &str, holder: &str, claims: &[(&str, &str)]) -> Cid {
    w.with_pair(issuer, holder, |svc, i, h, rng| flows::issue_credential(svc, i, h, claims, rng)).unwrap().unwrap()
}

pub fn random_word(rng: &mut impl Rng, len: usize) -> String {
    rng.sample_iter(&Alphanumeric).take(len).map(char::from).collect()
}

/// Pairwise DID that `actor` uses on its connection with `peer`.
pub fn my_pairwise(w: &World, actor: &str, peer: &str) -> Did {
    let a = w.wallet(actor).unwrap();
    let alias = a.connection_with(w.wallet(peer).unwrap()).unwrap();
    a.connection(&alias).unwrap().my_pairwise.clone()
}

// ---- Merkle oracle ----

fn sha(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Root of the sorted Merkle set over `cids`, built level by level with no
/// shared code from the registry.
pub fn oracle_root(cids: &BTreeSet<[u8; 16]>) -> [u8; 32] {
    if cids.is_empty() {
        return sha(&[b"EMPTY_REGISTRY"]);
    }
    let mut level: Vec<[u8; 32]> = cids.iter().map(|c| sha(&[&[0u8], c])).collect();
    while level.len() > 1 {
        if level.len() % 2 == 1 {
            level.push(*level.last().unwrap());
        }
        level = level.chunks(2).map(|p| sha(&[&[1u8], &p[0], &p[1]])).collect();
    }
    level[0]
}

// ---- property checks ----

/// Runs a random mix of onboarding, issuance, revocation and emergency
/// requests; returns the exported ledger.
fn random_ledger_history(seed: u64, ops: usize) -> Result<Vec<u8>, String> {
    let mut w = world(seed, &[("doc", Role::Practitioner), ("p0", Role::Patient)]);
    connect(&mut w, "doc", "p0");
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let mut patients = vec!["p0".to_string()];
    let mut issued: Vec<Cid> = Vec::new();
    for i in 0..ops {
        match rng.gen_range(0..4) {
            0 => {
                let name = format!("p{}", i + 1);
                w.add_actor(&name, Role::Patient).map_err(|e| e.to_string())?;
                w.onboard(&name).map_err(|e| e.to_string())?;
                connect(&mut w, "doc", &name);
                patients.push(name);
            }
            1 => {
                let holder = patients[rng.gen_range(0..patients.len())].clone();
                let value = random_word(&mut rng, 8);
                issued.push(issue(&mut w, "doc", &holder, &[("note", &value)]));
            }
            2 if !issued.is_empty() => {
                let cid = issued.swap_remove(rng.gen_range(0..issued.len()));
                let mut doc = w.wallet("doc").map_err(|e| e.to_string())?.clone();
                flows::revoke_credential(&w.svc, &mut doc, &cid).map_err(|e| e.to_string())?;
                *w.wallet_mut("doc").map_err(|e| e.to_string())? = doc;
            }
            _ => {
                let doctor = w.wallet("doc").map_err(|e| e.to_string())?;
                flows::emergency_access(&w.svc, doctor, "id:nobody", &[]).map_err(|e| e.to_string())?;
            }
        }
        w.svc.clock.advance(1);
    }
    if !w.svc.ledger.verify_replay().map_err(|e| e.to_string())? {
        return Err("live state differs from replayed log".into());
    }
    let export = w.svc.ledger.export_json();
    let imported = Ledger::import_json(&export, SimClock::new(0)).map_err(|e| e.to_string())?;
    if imported.state_digest() != w.svc.ledger.state_digest() {
        return Err("imported ledger has a different state digest".into());
    }
    if imported.export_json() != export {
        return Err("re-export of imported ledger differs".into());
    }
    Ok(export)
}

/// Same seed, same history, byte-identical ledger; replay and import agree.
pub fn check_replay_determinism(seed: u64, ops: usize) -> Result<(), String> {
    let a = random_ledger_history(seed, ops)?;
    let b = random_ledger_history(seed, ops)?;
    if a != b {
        return Err(format!("seed {seed}: two runs exported different ledgers"));
    }
    Ok(())
}

fn dummy_envelope(from: &Did, to: &Did, seq: u64, rng: &mut ChaCha20Rng) -> Envelope {
    let body = crypto::aead_encrypt(&[7u8; 32], &seq.to_be_bytes(), b"", rng).unwrap();
    Envelope { from: from.clone(), to: to.clone(), seq, body, sender_signature: Signature([0; 64]), from_doc: None }
}

/// Random interleaving of deliveries and partial pickups over several
/// queues: every envelope comes out exactly once, in delivery order.
pub fn check_fifo_exactly_once(seed: u64, recipients: usize, ops: usize) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mediator = Mediator::new(MEDIATOR_ENDPOINT);
    mediator.register_account("owner");
    let dids: Vec<Did> = (0..recipients)
        .map(|_| {
            let key = crypto::generate_keypair(&mut rng);
            let (did, _) = create_did(DidKind::Pairwise, &key, MEDIATOR_ENDPOINT, Timestamp(0)).unwrap();
            mediator.request_mediation("owner", &did, Timestamp(0)).unwrap();
            did
        })
        .collect();
    let mut sent: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut got: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut next = 0u64;
    let pick = |r: usize, n: usize, got: &mut BTreeMap<usize, Vec<u64>>| -> Result<(), String> {
        for item in mediator.pickup(&dids[r], n).map_err(|e| e.to_string())? {
            match item {
                QueuedMessage::Envelope(env) => got.entry(r).or_default().push(env.seq),
                QueuedMessage::Notice(_) => return Err("unexpected notice".into()),
            }
        }
        Ok(())
    };
    for _ in 0..ops {
        let r = rng.gen_range(0..recipients);
        if rng.gen_bool(0.6) {
            next += 1;
            let from = &dids[(r + 1) % recipients];
            mediator.deliver(dummy_envelope(from, &dids[r], next, &mut rng)).map_err(|e| e.to_string())?;
            sent.entry(r).or_default().push(next);
        } else {
            pick(r, rng.gen_range(0..5), &mut got)?;
        }
    }
    for r in 0..recipients {
        pick(r, usize::MAX, &mut got)?;
        if mediator.queue_len(&dids[r]) != 0 {
            return Err(format!("queue {r} not drained"));
        }
    }
    if sent != got {
        return Err(format!("seed {seed}: delivered {sent:?} but picked up {got:?}"));
    }
    Ok(())
}

/// A saved wallet opens with its passphrase and with none of `n` others.
pub fn check_wrong_passphrases(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut w = world(seed, &[("doc", Role::Practitioner), ("pat", Role::Patient)]);
    connect(&mut w, "doc", "pat");
    issue(&mut w, "doc", "pat", &[("blood_type", "A+")]);
    let passphrase = random_word(&mut rng, 16);
    let wallet = w.wallet_mut("pat").unwrap();
    wallet.set_passphrase(&passphrase);
    let file = wallet.to_file_bytes(&mut rng).map_err(|e| e.to_string())?;
    let reopened = WalletStore::from_file_bytes(&file, &passphrase).map_err(|e| e.to_string())?;
    if reopened.credentials() != wallet.credentials() || reopened.anywise_did() != wallet.anywise_did() {
        return Err("reopened wallet differs".into());
    }
    for i in 0..n {
        let len = rng.gen_range(0..24);
        let mut wrong = random_word(&mut rng, len);
        if wrong == passphrase {
            wrong.push('x');
        }
        match WalletStore::from_file_bytes(&file, &wrong) {
            Err(AgentError::WrongPassphrase) => {}
            other => return Err(format!("wrong passphrase #{i} gave {:?}", other.map(|_| "a wallet"))),
        }
    }
    Ok(())
}

/// Chi-square p-values for the byte distribution of each share over
/// `splits` splits of a fixed secret.
pub fn share_uniformity_pvalues(seed: u64, splits: usize) -> (f64, f64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let secret: [u8; 32] = std::array::from_fn(|i| (i as u8).wrapping_mul(37) ^ 0xA5);
    let mut counts = [[0u64; 256]; 2];
    for _ in 0..splits {
        let s = crypto::split_key(&secret, &mut rng).unwrap();
        assert_eq!(crypto::combine_key(&s).unwrap(), secret.to_vec());
        for (k, share) in [&s.share_msp, &s.share_contacts].into_iter().enumerate() {
            for b in share {
                counts[k][*b as usize] += 1;
            }
        }
    }
    let expected = (splits * 32) as f64 / 256.0;
    let dist = ChiSquared::new(255.0).unwrap();
    let p = |c: &[u64; 256]| {
        let stat: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        1.0 - dist.cdf(stat)
    };
    (p(&counts[0]), p(&counts[1]))
}

pub fn check_share_uniformity(seed: u64) -> Result<(), String> {
    let (a, b) = share_uniformity_pvalues(seed, 4096);
    if a < 1e-3 || b < 1e-3 {
        return Err(format!("chi-square p-values too small: msp {a:.5}, contacts {b:.5}"));
    }
    Ok(())
}

/// A presentation reveals exactly the chosen claims: the bytes contain no
/// undisclosed value or salt, and any change to a disclosed claim (even
/// re-signed by the holder) fails the digest check.
pub fn check_disclosure(seed: u64, mutations: usize) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut w = world(seed, &[("doc", Role::Practitioner), ("pat", Role::Patient)]);
    connect(&mut w, "doc", "pat");
    let names = ["blood_type", "allergy", "diagnosis", "weight", "insurer"];
    let values: Vec<String> = names.iter().map(|_| random_word(&mut rng, 14)).collect();
    let claims: Vec<(&str, &str)> = names.iter().copied().zip(values.iter().map(String::as_str)).collect();
    let cid = issue(&mut w, "doc", "pat", &claims);
    let audience = my_pairwise(&w, "doc", "pat");

    let mut chosen: Vec<&str> = names.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    if chosen.is_empty() {
        chosen.push(names[rng.gen_range(0..names.len())]);
    }
    let patient = w.wallet("pat").unwrap();
    let now = w.svc.clock.now();
    let vp = credentials::create_vp(patient, &w.svc.witnesses, &[cid], &chosen, &audience, None, now, &mut rng)
        .map_err(|e| e.to_string())?;
    let report = credentials::verify_vp(&vp, &w.svc.ledger, &audience, now);
    if !report.is_valid() {
        return Err(format!("honest presentation rejected: {report:?}"));
    }
    let bytes = String::from_utf8(vp.to_bytes()).unwrap();
    let vc = patient.credential(&cid).unwrap();
    for c in &vc.claims {
        let shown = chosen.contains(&c.name.as_str());
        let has_value = bytes.contains(&c.value);
        let has_salt = bytes.contains(&c.salt.to_b58());
        if shown != has_value || shown != has_salt {
            return Err(format!("claim {} shown={shown} but value={has_value} salt={has_salt}", c.name));
        }
    }

    let holder_key = patient.key_for(&vp.holder_did).unwrap().clone();
    for i in 0..mutations {
        let mut forged: VerifiablePresentation = vp.clone();
        let claim = {
            let d = &mut forged.disclosed[0];
            let k = rng.gen_range(0..d.claims.len());
            &mut d.claims[k]
        };
        match i % 3 {
            0 => claim.value.push(rng.sample(Alphanumeric) as char),
            1 => claim.salt.0[rng.gen_range(0..16)] ^= 1 << rng.gen_range(0..8),
            _ => {
                let other = names.iter().find(|n| **n != claim.name).unwrap();
                claim.name = other.to_string();
            }
        }
        forged.holder_signature = holder_key.sign(&forged.signing_bytes()).unwrap();
        let r = credentials::verify_vp(&forged, &w.svc.ledger, &audience, now);
        if r.disclosure_ok != Some(false) || r.is_valid() {
            return Err(format!("mutation {i} accepted: {r:?}"));
        }
    }
    Ok(())
}

/// Presentations only verify for their audience and before their expiry.
pub fn check_audience_and_expiry(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut w = world(seed, &[("doc", Role::Practitioner), ("pat", Role::Patient), ("lab", Role::Laboratory)]);
    connect(&mut w, "doc", "pat");
    connect(&mut w, "lab", "pat");
    let cid = issue(&mut w, "doc", "pat", &[("blood_type", "B-")]);
    let audience = my_pairwise(&w, "doc", "pat");
    let other = my_pairwise(&w, "lab", "pat");
    let ttl = rng.gen_range(1..500);
    let now = w.svc.clock.now();
    let vp = credentials::create_vp(w.wallet("pat").unwrap(), &w.svc.witnesses, &[cid], &["blood_type"], &audience, Some(ttl), now, &mut rng)
        .map_err(|e| e.to_string())?;
    let at = |t: u64, aud: &Did| credentials::verify_vp(&vp, &w.svc.ledger, aud, now.plus(t));

    let inside = rng.gen_range(0..ttl);
    if !at(inside, &audience).is_valid() {
        return Err(format!("valid presentation rejected at +{inside}"));
    }
    let r = at(inside, &other);
    if r.audience_ok != Some(false) || r.is_valid() {
        return Err(format!("wrong audience accepted: {r:?}"));
    }
    let late = ttl + rng.gen_range(0..500);
    let r = at(late, &audience);
    if r.expired != Some(true) || r.is_valid() {
        return Err(format!("expired presentation accepted at +{late}: {r:?}"));
    }
    let mut redirected = vp.clone();
    redirected.audience_did = other.clone();
    let r = credentials::verify_vp(&redirected, &w.svc.ledger, &other, now);
    if r.holder_signature_ok != Some(false) || r.is_valid() {
        return Err(format!("re-addressed presentation accepted: {r:?}"));
    }
    Ok(())
}

/// One random register/revoke sequence ending with `target` registrations.
/// The registry root must match the oracle at checkpoints and at the end,
/// and the final state must accept proofs for exactly the active set.
pub fn check_revocation_sequence(seed: u64, target: usize) -> Result<(), String> {
    use ssi_core::revocation::{init_registry, verify_non_revocation, NonRevocationProof, Unanchored};

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let key = crypto::generate_keypair(&mut rng);
    let (issuer, _) = create_did(DidKind::Anywise, &key, MEDIATOR_ENDPOINT, Timestamp(0)).unwrap();
    let (mut reg, state0) = init_registry(issuer, &key, &Unanchored, &mut rng).map_err(|e| e.to_string())?;
    if state0.root.bytes != oracle_root(&BTreeSet::new()) {
        return Err("empty root differs".into());
    }

    let mut active: BTreeSet<[u8; 16]> = BTreeSet::new();
    let mut revoked: Vec<Cid> = Vec::new();
    let mut stale: BTreeMap<Cid, NonRevocationProof> = BTreeMap::new();
    let every = (target / 16).max(1);
    let mut registered = 0;
    let mut step = 0usize;
    while registered < target {
        step += 1;
        if !active.is_empty() && rng.gen_bool(0.3) {
            let pick = *active.iter().nth(rng.gen_range(0..active.len())).unwrap();
            let cid = Cid(pick);
            stale.insert(cid, reg.prove_non_revocation(&cid).map_err(|e| e.to_string())?);
            reg.revoke_credential(cid, &key, &Unanchored).map_err(|e| e.to_string())?;
            active.remove(&pick);
            revoked.push(cid);
        } else {
            let cid = Cid::random(&mut rng);
            reg.register_credential(cid, &key, &Unanchored).map_err(|e| e.to_string())?;
            active.insert(cid.0);
            registered += 1;
        }
        if step % every == 0 && reg.root().bytes != oracle_root(&active) {
            return Err(format!("seed {seed}: root mismatch at step {step} with {} active", active.len()));
        }
    }

    let state = reg.signed_state(&key).map_err(|e| e.to_string())?;
    if !state.verify_signature(&key.public_key) {
        return Err("state signature does not verify".into());
    }
    if state.root.bytes != oracle_root(&active) {
        return Err(format!("seed {seed}: final root mismatch with {} active", active.len()));
    }
    let proofs = reg.prove_all();
    let proven: BTreeSet<[u8; 16]> = proofs.iter().filter(|p| verify_non_revocation(p, &state)).map(|p| p.cid.0).collect();
    if proven != active || proofs.len() != active.len() {
        return Err(format!("seed {seed}: {} proofs verify, {} active", proven.len(), active.len()));
    }
    for cid in &revoked {
        if reg.prove_non_revocation(cid).is_ok() {
            return Err(format!("seed {seed}: revoked cid {} still provable", cid.to_b58()));
        }
        let old = &stale[cid];
        if verify_non_revocation(old, &state) {
            return Err(format!("seed {seed}: stale proof accepted for {}", cid.to_b58()));
        }
        let replayed = NonRevocationProof { epoch: state.epoch, ..old.clone() };
        if verify_non_revocation(&replayed, &state) {
            return Err(format!("seed {seed}: old path accepted for revoked {}", cid.to_b58()));
        }
    }
    Ok(())
}

/// Target size for sequence `i` of a batch: a tenth of all sequences hit the
/// 1,024 cap, the rest are spread log-uniformly below it.
pub fn sequence_size(i: u64) -> usize {
    if i % 10 == 0 {
        return 1024;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(i ^ 0xC1D5);
    let exp: f64 = rng.gen_range(0.0..10.0);
    2f64.powf(exp).round().max(1.0) as usize
}

pub fn group(w: &mut World, main: &str, others: &[&str], f: impl FnOnce(&flows::Services, &mut WalletStore, &mut [&mut WalletStore], &mut ChaCha20Rng) -> Result<u64, flows::FlowError>) -> Result<u64, String> {
    let names: Vec<String> = others.iter().map(|s| s.to_string()).collect();
    w.with_group(main, &names, f).map_err(|e| e.to_string())?.map_err(|e| e.to_string())
}

fn canonical_vc_set(wallet: &WalletStore) -> BTreeSet<Vec<u8>> {
    wallet.credentials().values().map(|vc| vc.to_canonical_bytes()).collect()
}

/// Setup, device loss, tampered restores, then a clean restore.
pub fn check_recovery_trial(seed: u64) -> Result<(), String> {
    use ssi_core::agents::AgentError;
    use ssi_core::flows::FlowError;

    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xBAC0);
    let mut w = world(
        seed,
        &[("pat", Role::Patient), ("doc", Role::Practitioner), ("lab", Role::Laboratory), ("c1", Role::Patient), ("c2", Role::Patient)],
    );
    connect(&mut w, "doc", "pat");
    connect(&mut w, "lab", "pat");
    connect(&mut w, "pat", "c1");
    connect(&mut w, "pat", "c2");
    for _ in 0..rng.gen_range(1..5) {
        let issuer = if rng.gen_bool(0.5) { "doc" } else { "lab" };
        let v1 = random_word(&mut rng, 10);
        let v2 = random_word(&mut rng, 6);
        issue(&mut w, issuer, "pat", &[("finding", &v1), ("code", &v2)]);
    }
    let seq = group(&mut w, "pat", &["c1", "c2"], |svc, p, cs, rng| flows::recovery_setup(svc, p, cs, rng))?;
    let original = canonical_vc_set(w.wallet("pat").unwrap());
    let patient_did = w.wallet("pat").unwrap().anywise_did().unwrap().clone();
    let old_owner = w.wallet("pat").unwrap().owner.clone();

    w.lose_wallet("pat").unwrap();
    let handle = World::identity_handle("pat");
    let helper = if rng.gen_bool(0.5) { "c1" } else { "c2" };

    let len = {
        let mut n = 0;
        w.svc.mediator.tamper_backup(&patient_did, seq, |b| n = b.len());
        n
    };
    for _ in 0..3 {
        let at = rng.gen_range(0..len);
        let mask = rng.gen_range(1..=255u8);
        w.svc.mediator.tamper_backup(&patient_did, seq, |b| b[at] ^= mask);
        let got = w.with_pair("pat", helper, |svc, p, c, rng| flows::recover_wallet(svc, p, &handle, c, rng)).unwrap();
        if got != Err(FlowError::Agent(AgentError::DigestMismatch)) {
            return Err(format!("seed {seed}: tampered byte {at} gave {got:?}"));
        }
        if !w.wallet("pat").unwrap().credentials().is_empty() {
            return Err(format!("seed {seed}: aborted restore left credentials behind"));
        }
        w.svc.mediator.tamper_backup(&patient_did, seq, |b| b[at] ^= mask);
    }

    w.with_pair("pat", helper, |svc, p, c, rng| flows::recover_wallet(svc, p, &handle, c, rng))
        .unwrap()
        .map_err(|e| format!("seed {seed}: clean restore failed: {e}"))?;
    let restored = w.wallet("pat").unwrap();
    if canonical_vc_set(restored) != original {
        return Err(format!("seed {seed}: restored credential set differs"));
    }
    if !restored.connections().is_empty() {
        return Err(format!("seed {seed}: restored wallet has {} connections", restored.connections().len()));
    }
    if restored.anywise_did() != Some(&patient_did) || restored.owner != old_owner {
        return Err(format!("seed {seed}: restored wallet has a different identity"));
    }
    Ok(())
}

fn security_reader(w: &World) -> ssi_core::ledger::Identity {
    w.wallet("admin").unwrap().ledger_identity().unwrap().clone()
}

fn position(trace: &[flows::FlowStep], action: &str) -> Option<usize> {
    trace.iter().position(|s| s.action == action)
}

/// Runs one emergency request and checks it added exactly one security
/// record, matching the returned one.
fn emergency_once(w: &mut World, patient_ref: &str, contacts: &[&str]) -> Result<(flows::EmergencyResult, Vec<flows::FlowStep>), String> {
    use ssi_core::ledger::ChannelId;

    let before = w.svc.ledger.tx_count(ChannelId::Security);
    w.svc.take_trace();
    let list: Vec<&WalletStore> = contacts.iter().map(|c| w.wallet(c).unwrap()).collect();
    let result = flows::emergency_access(&w.svc, w.wallet("er").unwrap(), patient_ref, &list).map_err(|e| e.to_string())?;
    let trace = w.svc.take_trace();
    let after = w.svc.ledger.tx_count(ChannelId::Security);
    if after != before + 1 {
        return Err(format!("{patient_ref}: {} security records written", after - before));
    }
    let records = w.svc.ledger.emergency_records(&security_reader(w)).map_err(|e| e.to_string())?;
    if records.last() != Some(&result.record) {
        return Err(format!("{patient_ref}: ledger record differs from returned record"));
    }
    Ok((result, trace))
}

/// All three outcomes of an emergency request. Returns a short summary.
pub fn check_emergency_branches(seed: u64) -> Result<String, String> {
    use ssi_core::flows::{EmergencyData, ShareKind};
    use ssi_core::ledger::EmergencyOutcome;

    let mut w = world(
        seed,
        &[
            ("pat", Role::Patient),
            ("solo", Role::Patient),
            ("lone", Role::Patient),
            ("doc", Role::Practitioner),
            ("er", Role::Practitioner),
            ("c1", Role::Patient),
            ("c2", Role::Patient),
            ("admin", Role::Admin),
        ],
    );
    for (a, b) in [("doc", "pat"), ("pat", "c1"), ("pat", "c2"), ("solo", "c1")] {
        connect(&mut w, a, b);
    }
    issue(&mut w, "doc", "pat", &[("condition", "asthma")]);
    group(&mut w, "pat", &["c1", "c2"], |svc, p, cs, rng| flows::recovery_setup(svc, p, cs, rng))?;
    group(&mut w, "solo", &["c1"], |svc, p, cs, rng| flows::register_contacts(svc, p, cs, rng).map(|l| l.len() as u64))?;
    let pat_did = w.wallet("pat").unwrap().anywise_did().unwrap().clone();
    let c2_did = w.wallet("c2").unwrap().anywise_did().unwrap().clone();
    let c1_did = w.wallet("c1").unwrap().anywise_did().unwrap().clone();

    // Everyone silent: the key stays split and the doctor gets names only.
    w.wallet_mut("c1").unwrap().set_responsive(false);
    w.wallet_mut("c2").unwrap().set_responsive(false);
    let (silent, _) = emergency_once(&mut w, "id:pat", &["c1", "c2"])?;
    if silent.outcome != EmergencyOutcome::ContactListReleased || silent.record.contact_ack.is_some() {
        return Err(format!("silent contacts gave {:?}", silent.outcome));
    }
    if !w.svc.shares.holds("er", &pat_did).is_empty() {
        return Err("doctor holds a share before any contact answered".into());
    }

    // (a) first contact silent, second answers.
    w.wallet_mut("c2").unwrap().set_responsive(true);
    let (a, trace) = emergency_once(&mut w, "id:pat", &["c1", "c2"])?;
    if a.outcome != EmergencyOutcome::KeyReleased || a.record.contact_ack.as_ref() != Some(&c2_did) {
        return Err(format!("branch a gave {:?} acked by {:?}", a.outcome, a.record.contact_ack));
    }
    let order: Vec<Option<usize>> =
        ["contact_ack", "record_emergency_access", "release_shares", "recombine_key"].iter().map(|s| position(&trace, s)).collect();
    if order.iter().any(Option::is_none) || !order.windows(2).all(|p| p[0] < p[1]) {
        return Err(format!("branch a step order {order:?}"));
    }
    let expected: BTreeSet<Vec<u8>> = canonical_vc_set(w.wallet("pat").unwrap());
    match &a.data {
        EmergencyData::Records(vcs) if vcs.iter().map(|v| v.to_canonical_bytes()).collect::<BTreeSet<_>>() == expected => {}
        other => return Err(format!("branch a released {other:?}")),
    }
    if w.svc.shares.holds("er", &pat_did) != BTreeSet::from([ShareKind::Msp, ShareKind::Contacts]) {
        return Err("doctor did not receive both shares".into());
    }
    if !w.svc.shares.violations().is_empty() {
        return Err(format!("share violations {:?}", w.svc.shares.violations()));
    }
    let custody = w.svc.msp.custody(&pat_did).unwrap();
    let secret = w.wallet("pat").unwrap().backup_key().unwrap().private_key.0.to_vec();
    let msp_share = custody.share_msp.unwrap();
    let contact_share = w.wallet("c2").unwrap().held_share(&pat_did).unwrap().to_vec();
    if msp_share == secret || contact_share == secret || crypto::combine_parts(&msp_share, &contact_share).unwrap() != secret {
        return Err("shares do not split the backup key".into());
    }

    // (b) contacts registered without a backup.
    let (b, _) = emergency_once(&mut w, "id:solo", &["c1"])?;
    if b.outcome != EmergencyOutcome::ContactListReleased || b.data != EmergencyData::ContactList(vec![c1_did]) {
        return Err(format!("branch b gave {:?} {:?}", b.outcome, b.data));
    }

    // (c) no contacts at all, and an unknown patient.
    let (c, _) = emergency_once(&mut w, "id:lone", &[])?;
    let (unknown, _) = emergency_once(&mut w, "id:nobody", &[])?;
    for r in [&c, &unknown] {
        if r.outcome != EmergencyOutcome::Denied || r.data != EmergencyData::None {
            return Err(format!("branch c gave {:?}", r.outcome));
        }
    }
    if unknown.record.patient_did.is_some() {
        return Err("unknown patient resolved to a DID".into());
    }
    Ok("KeyReleased, ContactListReleased (x2), Denied (x2)".into())
}

/// share_cloud, fetch, revoke: the next fetch fails and the grantee's queue
/// holds one termination notice for that presentation.
pub fn check_access_revocation(seed: u64) -> Result<(), String> {
    use ssi_core::agents::{AgentError, Notice};
    use ssi_core::flows::FlowError;

    let mut w = world(seed, &[("pat", Role::Patient), ("doc", Role::Practitioner)]);
    connect(&mut w, "doc", "pat");
    issue(&mut w, "doc", "pat", &[("blood_type", "O-"), ("allergy", "latex")]);
    let (vp_id, report) = w
        .with_pair("pat", "doc", |svc, p, d, rng| flows::share_cloud(svc, p, d, &["allergy"], 100, rng))
        .unwrap()
        .map_err(|e| e.to_string())?;
    if !report.is_valid() {
        return Err(format!("shared presentation invalid: {report:?}"));
    }
    w.svc.clock.advance(5);
    let (p, d) = (w.wallet("pat").unwrap(), w.wallet("doc").unwrap());
    let fetched = flows::fetch_shared(&w.svc, d, p, &vp_id).map_err(|e| e.to_string())?;
    if !fetched.is_valid() {
        return Err(format!("fetch before revocation invalid: {fetched:?}"));
    }
    flows::revoke_access(&w.svc, p, d, &vp_id, false).map_err(|e| e.to_string())?;
    match flows::fetch_shared(&w.svc, d, p, &vp_id) {
        Err(FlowError::Agent(AgentError::Revoked)) => {}
        other => return Err(format!("fetch after revocation gave {other:?}")),
    }
    let inbox = my_pairwise(&w, "doc", "pat");
    let notices: Vec<_> = w
        .svc
        .mediator
        .peek(&inbox)
        .into_iter()
        .filter(|m| matches!(m, QueuedMessage::Notice(Notice::AccessTerminated { vp_id: v, .. }) if *v == vp_id))
        .collect();
    if notices.len() != 1 {
        return Err(format!("{} termination notices queued", notices.len()));
    }
    Ok(())
}
