//! Scripted multi-actor scenarios and the latency/throughput bench.

pub mod bench;
pub mod scenario;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::agents::WalletStore;
use crate::flows::{self, FlowError, Services};
use crate::ledger::{Authorization, Role};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("unknown actor {0:?}")]
    UnknownActor(String),
    #[error("actor {0:?} declared twice")]
    DuplicateActor(String),
    #[error("a flow needs two different actors, got {0:?} twice")]
    SameActor(String),
    #[error("unknown reference {0:?}")]
    UnknownReference(String),
    #[error("unknown bench op {0:?}")]
    UnknownOp(String),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared services plus a set of named wallets and one seeded RNG.
pub struct World {
    pub svc: Services,
    pub rng: ChaCha20Rng,
    wallets: BTreeMap<String, WalletStore>,
    roles: BTreeMap<String, Role>,
}

impl World {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let svc = Services::new(&mut rng);
        World { svc, rng, wallets: BTreeMap::new(), roles: BTreeMap::new() }
    }

    pub fn add_actor(&mut self, name: &str, role: Role) -> Result<(), HarnessError> {
        if self.wallets.contains_key(name) {
            return Err(HarnessError::DuplicateActor(name.to_string()));
        }
        self.wallets.insert(name.to_string(), WalletStore::new(name));
        self.roles.insert(name.to_string(), role);
        Ok(())
    }

    pub fn actors(&self) -> impl Iterator<Item = &str> {
        self.wallets.keys().map(String::as_str)
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.roles.get(name).copied()
    }

    /// The real-world identity reference an actor registers with the CA.
    pub fn identity_handle(name: &str) -> String {
        format!("id:{name}")
    }

    pub fn wallet(&self, name: &str) -> Result<&WalletStore, HarnessError> {
        self.wallets.get(name).ok_or_else(|| HarnessError::UnknownActor(name.to_string()))
    }

    pub fn wallet_mut(&mut self, name: &str) -> Result<&mut WalletStore, HarnessError> {
        self.wallets.get_mut(name).ok_or_else(|| HarnessError::UnknownActor(name.to_string()))
    }

    /// Swaps in a blank wallet for `name`, as if the device were lost.
    pub fn lose_wallet(&mut self, name: &str) -> Result<WalletStore, HarnessError> {
        let w = self.wallet_mut(name)?;
        Ok(std::mem::replace(w, WalletStore::new(name)))
    }

    pub fn onboard(&mut self, name: &str) -> Result<Authorization, HarnessError> {
        let role = self.role(name).ok_or_else(|| HarnessError::UnknownActor(name.to_string()))?;
        let handle = Self::identity_handle(name);
        let w = self.wallets.get_mut(name).ok_or_else(|| HarnessError::UnknownActor(name.to_string()))?;
        Ok(flows::onboard(&self.svc, w, role.as_str(), &handle, &mut self.rng)?)
    }

    /// Runs `f` with both wallets borrowed mutably.
    pub fn with_pair<T>(
        &mut self,
        a: &str,
        b: &str,
        f: impl FnOnce(&Services, &mut WalletStore, &mut WalletStore, &mut ChaCha20Rng) -> T,
    ) -> Result<T, HarnessError> {
        if a == b {
            return Err(HarnessError::SameActor(a.to_string()));
        }
        let mut wa = self.wallets.remove(a).ok_or_else(|| HarnessError::UnknownActor(a.to_string()))?;
        let Some(mut wb) = self.wallets.remove(b) else {
            self.wallets.insert(a.to_string(), wa);
            return Err(HarnessError::UnknownActor(b.to_string()));
        };
        let out = f(&self.svc, &mut wa, &mut wb, &mut self.rng);
        self.wallets.insert(a.to_string(), wa);
        self.wallets.insert(b.to_string(), wb);
        Ok(out)
    }

    /// Runs `f` with one wallet borrowed mutably and a list of others.
    pub fn with_group<T>(
        &mut self,
        main: &str,
        others: &[String],
        f: impl FnOnce(&Services, &mut WalletStore, &mut [&mut WalletStore], &mut ChaCha20Rng) -> T,
    ) -> Result<T, HarnessError> {
        let mut names = vec![main.to_string()];
        for o in others {
            if names.contains(o) {
                return Err(HarnessError::SameActor(o.clone()));
            }
            if !self.wallets.contains_key(o) {
                return Err(HarnessError::UnknownActor(o.clone()));
            }
            names.push(o.clone());
        }
        let mut main_w = self.wallets.remove(main).ok_or_else(|| HarnessError::UnknownActor(main.to_string()))?;
        let mut taken: Vec<WalletStore> = others.iter().map(|o| self.wallets.remove(o).expect("checked")).collect();
        let out = {
            let mut refs: Vec<&mut WalletStore> = taken.iter_mut().collect();
            f(&self.svc, &mut main_w, &mut refs, &mut self.rng)
        };
        self.wallets.insert(main.to_string(), main_w);
        for (name, w) in others.iter().zip(taken) {
            self.wallets.insert(name.clone(), w);
        }
        Ok(out)
    }
}
