//! DRAM PUF phenotype mutual authentication.
//!
//! The crate is layered bottom-up: [`crypto`] primitives, the [`puf_sim`]
//! simulator, [`phenotype`] imaging and reliability analysis, the
//! [`authenticator`] classifier, the [`protocol`] state machines, the
//! [`transport`] channels, and the [`adversary`] harness. [`metrics`] counts
//! primitive invocations against the protocol's cost model.

pub mod adversary;
pub mod authenticator;
pub mod crypto;
pub mod metrics;
pub mod phenotype;
pub mod protocol;
pub mod puf_sim;
pub mod transport;
