// SPDX-License-Identifier: Apache-2.0

//! Invariants as property tests.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::OnceLock;

use proptest::prelude::*;

use fasco_core::granule::{AccessKind, AccessOutcome, GranuleId, GranuleSpace, RealmId, WorldId};
use fasco_core::harness::run::execute;
use fasco_core::harness::scenario;
use fasco_core::harness::scenario::layout;
use fasco_core::harness::suite::{pending_read_world, IAGO_REQUEST};
use fasco_core::rmm::{Mutations, RealmState, SyscallReply, World};
use fasco_core::rtt::{Ipa, Perms, RttTree, Stage2Fault, Walk};
use fasco_core::shielded_io::{open_stream, Key, StreamSealer};
use fasco_core::trace::{Event, Trace};

const POOL: u32 = 48;

fn realm(i: u8) -> WorldId {
    WorldId::ContainerRealm(RealmId(u32::from(i) + 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Whatever sequence of delegations and releases happens, the host is
    /// refused exactly the granules some realm owns, and no realm reaches
    /// another's granule.
    #[test]
    fn ownership_is_exclusive(ops in prop::collection::vec((any::<bool>(), 0..POOL, 0u8..4), 1..200)) {
        let mut gs = GranuleSpace::new(POOL as usize);
        let mut trace = Trace::new();
        let mut model: BTreeMap<u32, WorldId> = BTreeMap::new();
        for (delegate, g, r) in ops {
            let id = GranuleId(g);
            if delegate {
                if gs.delegate(id, realm(r), &mut trace).is_ok() {
                    prop_assert!(!model.contains_key(&g));
                    model.insert(g, realm(r));
                }
            } else if gs.undelegate(id, &mut trace).is_ok() {
                prop_assert!(model.remove(&g).is_some());
                prop_assert!(gs.get(id).unwrap().contents().iter().all(|&b| b == 0));
            }
        }
        for g in 0..POOL {
            let id = GranuleId(g);
            let host = gs.permits(WorldId::NormalWorld, id, AccessKind::Read);
            match model.get(&g) {
                Some(&owner) => {
                    prop_assert_eq!(host, AccessOutcome::GptFault);
                    for r in 0..4 {
                        let expect = if realm(r) == owner { AccessOutcome::Allowed } else { AccessOutcome::GptFault };
                        prop_assert_eq!(gs.permits(realm(r), id, AccessKind::Write), expect);
                    }
                }
                None => prop_assert_eq!(host, AccessOutcome::Allowed),
            }
        }
    }

    /// A cloned range reads the same as its source; after revoking the
    /// source and handing the pages over, only the clone translates.
    #[test]
    fn clone_then_revoke(levels in 2u8..=4, pages in prop::collection::btree_set(0u64..600, 1..80), slot in 1u64..3) {
        let base = slot * RttTree::entry_span(levels, 0);
        let end = base + 600 * 4096;
        let sys = WorldId::SystemRealm;
        let ctr = WorldId::ContainerRealm(RealmId(1));
        let mut gs = GranuleSpace::new(pages.len() + 64);
        let mut trace = Trace::new();
        let mut next = 0u32;
        let mut grab = |gs: &mut GranuleSpace, to: WorldId| {
            let g = GranuleId(next);
            next += 1;
            gs.delegate(g, to, &mut Trace::new()).unwrap();
            g
        };
        let mut sys_nodes: VecDeque<GranuleId> = (0..24).map(|_| grab(&mut gs, sys)).collect();
        let mut ctr_nodes: VecDeque<GranuleId> = (0..24).map(|_| grab(&mut gs, ctr)).collect();
        let mut src = RttTree::new(sys, levels, &mut gs, &mut sys_nodes).unwrap();
        let mut mapped = Vec::new();
        for p in &pages {
            let g = grab(&mut gs, sys);
            let ipa = Ipa(base + p * 4096);
            src.map(&mut gs, &mut sys_nodes, ipa, g, Perms::RW).unwrap();
            mapped.push((ipa, g));
        }
        let clone = src.clone_range(&mut gs, &mut ctr_nodes, ctr, base, end).unwrap();
        for &(ipa, _) in &mapped {
            prop_assert_eq!(clone.leaf(ipa), src.leaf(ipa));
        }
        prop_assert_eq!(src.revoke_range(&mut gs, Ipa(base), Ipa(end)).unwrap(), mapped.len());
        for &(_, g) in &mapped {
            gs.transfer(g, ctr, &mut trace).unwrap();
        }
        for &(ipa, g) in &mapped {
            prop_assert_eq!(src.resolve(&gs, ipa, AccessKind::Read), Walk::Fault(Stage2Fault::Empty));
            prop_assert_eq!(clone.resolve(&gs, ipa, AccessKind::Read), Walk::Translated { granule: g, offset: 0 });
        }
    }

    /// Any single-bit flip, truncation or record swap in a sealed stream is
    /// refused; the untouched stream opens to the original bytes.
    #[test]
    fn sealed_streams_detect_tampering(data in prop::collection::vec(any::<u8>(), 1..10_000), pick in any::<u64>(), kind in 0u8..3) {
        let key = Key::from_bytes([7; 32]);
        let mut sealer = StreamSealer::new(key.clone(), RealmId(3), 9);
        let mut sealed = sealer.seal(&data[..data.len() / 2]);
        sealed.extend(sealer.seal(&data[data.len() / 2..]));
        prop_assert_eq!(open_stream(&key, 9, &sealed).unwrap(), data.clone());
        let mut bad = sealed.clone();
        match kind {
            0 => {
                let bit = pick % (bad.len() as u64 * 8);
                bad[(bit / 8) as usize] ^= 1 << (bit % 8);
            }
            1 => bad.truncate((pick % bad.len() as u64) as usize),
            _ => {
                // Swap the two sealed halves.
                let first = sealer_len(&data[..data.len() / 2]);
                bad = sealed[first..].iter().chain(&sealed[..first]).copied().collect();
            }
        }
        if bad != sealed {
            let opened = open_stream(&key, 9, &bad);
            // Truncating exactly at a record boundary yields a shorter prefix,
            // which the file layer catches through its recorded length.
            if let Ok(prefix) = opened {
                prop_assert!(kind == 1 && prefix.len() < data.len() && data.starts_with(&prefix));
            }
        }
    }

    /// k forwarded syscalls cost exactly 4k domain switches.
    #[test]
    fn four_switches_per_syscall(k in 0usize..40) {
        let exec = execute(&scenario::getpid_loop(k), 3, &Mutations::none(), Vec::new()).unwrap();
        let n = exec.world.trace().records().iter().filter(|r| matches!(r.event, Event::Switch { .. })).count();
        prop_assert_eq!(n, 4 * k);
    }
}

fn sealer_len(part: &[u8]) -> usize {
    StreamSealer::new(Key::from_bytes([0; 32]), RealmId(0), 0)
        .seal(part)
        .len()
}

fn pending() -> &'static (World, RealmId) {
    static CELL: OnceLock<(World, RealmId)> = OnceLock::new();
    CELL.get_or_init(|| pending_read_world(11, &Mutations::none()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Whatever the host claims, a delivered reply stays within the request,
    /// the buffer and the errno convention.
    #[test]
    fn delivered_replies_are_bounded(
        retval in prop_oneof![any::<i64>(), -5000i64..300],
        out_len in prop_oneof![any::<u64>(), 0u64..300, Just(IAGO_REQUEST)],
        ptr_delta in prop_oneof![Just(0u64), any::<u64>(), 0u64..0x3000],
        has_ptr in any::<bool>(),
        errno in prop_oneof![Just(0i64), any::<i64>(), 0i64..200],
    ) {
        let (base, r) = pending();
        let buf = base.descriptor(*r).unwrap().window_base().0 + layout::BUFFER;
        let reply = SyscallReply {
            retval,
            out_len,
            out_ptr: has_ptr.then(|| Ipa(buf.wrapping_add(ptr_delta))),
            errno,
        };
        let mut w = base.clone();
        if w.reenter_container(*r, reply).is_ok() {
            prop_assert!(out_len <= IAGO_REQUEST);
            if retval < 0 {
                prop_assert!(out_len == 0 && retval >= -4095 && errno == -retval);
            } else {
                prop_assert_eq!(retval as u64, out_len);
                prop_assert!(out_len == 0 || reply.out_ptr == Some(Ipa(buf)));
            }
            prop_assert_eq!(w.descriptor(*r).unwrap().state, RealmState::Running);
        } else {
            prop_assert_eq!(w.descriptor(*r).unwrap().state, RealmState::TrapPending);
        }
    }

    /// Same scenario and seed, same trace.
    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), which in 0usize..6) {
        let sc = &scenario::corpus()[which];
        let a = execute(sc, seed, &Mutations::none(), sc.adversary.clone()).unwrap();
        let b = execute(sc, seed, &Mutations::none(), sc.adversary.clone()).unwrap();
        prop_assert_eq!(a.world.trace().render(), b.world.trace().render());
    }
}

/// Destroyed realms never come back, and every realm a run creates ends
/// destroyed with its memory returned.
#[test]
fn every_run_ends_with_realms_destroyed() {
    for sc in scenario::corpus() {
        let exec = execute(&sc, sc.seed, &Mutations::none(), sc.adversary.clone()).unwrap();
        let containers: BTreeSet<RealmId> =
            exec.containers.iter().filter_map(|c| c.realm).collect();
        for d in exec.world.containers() {
            assert!(containers.contains(&d.id));
            assert_eq!(
                d.state,
                RealmState::Destroyed,
                "{}: realm {}",
                sc.name,
                d.id.0
            );
            assert!(!RealmState::Destroyed.may_become(RealmState::Running));
        }
    }
}
