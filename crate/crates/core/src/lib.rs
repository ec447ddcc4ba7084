//! Desk-scale simulation of rowhammer-driven weight leakage from a quantized
//! neural network, plus substitute-model training guided by the leaked bits.
//!
//! The pipeline has two stages:
//!
//! 1. **Leakage.** [`dram_sim`] models vulnerable DRAM cells and the
//!    data-dependent flip rule of double-sided hammering. [`memsys`] models the
//!    page pool, swap-based exhaustion and the per-CPU pageset whose LIFO order
//!    lets an attacker steer where victim pages land. [`victim_runtime`] packs
//!    the victim's int8 weights into pages and emits its page-access trace.
//!    [`hammerleak`] ties them together into multi-round attacks that fill a
//!    [`hammerleak::LeakLedger`].
//! 2. **Training.** [`bitprofile`] turns leaked bits into per-weight projected
//!    ranges, and [`subtrain`] trains a substitute network that is pulled toward
//!    the range midpoints, then evaluates accuracy, fidelity and adversarial
//!    transfer.
//!
//! [`experiment`] wires the two stages into a reproducible, config-driven run.

pub mod bitprofile;
pub mod dram_sim;
pub mod error;
pub mod experiment;
pub mod hammerleak;
pub mod memsys;
pub mod seeds;
pub mod subtrain;
pub mod victim_runtime;

pub use error::{ConfigIssue, Error, Result};
