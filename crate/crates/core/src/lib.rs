// SPDX-License-Identifier: Apache-2.0

//! Simulation of a confidential container platform built from realms.
//!
//! A Realm Management Monitor ([`rmm`]) owns a pool of physical granules
//! ([`granule`]) and per-realm stage-2 translation tables ([`rtt`]). A
//! privileged System Realm ([`system_realm`]) services container syscalls by
//! forwarding them to an untrusted host OS ([`host`]), shielding file,
//! channel and console data on the way ([`shielded_io`]). Cache and TLB
//! maintenance is modelled explicitly ([`coherence`]) so that missing
//! maintenance surfaces as a reported violation. The [`harness`] drives
//! scenarios, lifecycle runs and the audit suite.

pub mod coherence;
pub mod cpu;
pub mod granule;
pub mod harness;
pub mod host;
pub mod image;
pub mod rmm;
pub mod rtt;
pub mod shielded_io;
pub mod system_realm;
pub mod trace;
