//! Self-sovereign identity stack for patient-controlled access to health
//! records: wallets, a shared mediator, a simulated permissioned ledger,
//! verifiable credentials with selective disclosure and revocation, and the
//! end-to-end flows that tie them together.

pub mod agents;
pub mod clock;
pub mod codec;
pub mod credentials;
pub mod crypto;
pub mod identity;
pub mod ledger;
pub mod flows;
pub mod harness;
pub mod revocation;
