// SPDX-License-Identifier: Apache-2.0

//! Simulated physical memory: fixed-size granules, each with exactly one
//! owning world, plus the granule-protection check that every non-monitor
//! access goes through.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Event, GranuleOp, GranuleOutcome, Trace};

pub const GRANULE_SIZE: usize = 4096;
pub const GRANULE_SHIFT: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GranuleId(pub u32);

impl fmt::Display for GranuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RealmId(pub u32);

impl fmt::Display for RealmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The world a granule belongs to, or on whose behalf an access is made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WorldId {
    NormalWorld,
    /// Present for completeness of the protection table; no workload runs here.
    Secure,
    SystemRealm,
    ContainerRealm(RealmId),
    /// The monitor itself.
    Root,
}

impl WorldId {
    pub fn is_realm(self) -> bool {
        matches!(self, WorldId::SystemRealm | WorldId::ContainerRealm(_))
    }

    pub fn pas(self) -> Pas {
        match self {
            WorldId::NormalWorld => Pas::Normal,
            WorldId::Secure => Pas::Secure,
            WorldId::SystemRealm | WorldId::ContainerRealm(_) => Pas::Realm,
            WorldId::Root => Pas::Root,
        }
    }
}

impl fmt::Display for WorldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorldId::NormalWorld => f.write_str("normal"),
            WorldId::Secure => f.write_str("secure"),
            WorldId::SystemRealm => f.write_str("system"),
            WorldId::ContainerRealm(id) => write!(f, "container:{}", id.0),
            WorldId::Root => f.write_str("root"),
        }
    }
}

/// Physical address space tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pas {
    Normal,
    Secure,
    Realm,
    Root,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
    Exec,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Exec => "exec",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOutcome {
    Allowed,
    GptFault,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GranuleError {
    #[error("unknown granule {0}")]
    UnknownGranule(GranuleId),
    #[error("{granule} already delegated to {owner}")]
    AlreadyDelegated { granule: GranuleId, owner: WorldId },
    #[error("{0} cannot receive delegated granules")]
    InvalidTarget(WorldId),
    #[error("{0} is not owned by a realm")]
    NotDelegated(GranuleId),
    #[error("{0} is still mapped")]
    StillMapped(GranuleId),
    #[error("{0} is still shared")]
    StillShared(GranuleId),
    #[error("access to {0} faulted in the protection table")]
    GptFault(GranuleId),
    #[error("range {offset}+{len} exceeds the granule")]
    OutOfBounds { offset: usize, len: usize },
}

impl GranuleError {
    fn tag(&self) -> &'static str {
        match self {
            GranuleError::UnknownGranule(_) => "unknown-granule",
            GranuleError::AlreadyDelegated { .. } => "already-delegated",
            GranuleError::InvalidTarget(_) => "invalid-target",
            GranuleError::NotDelegated(_) => "not-delegated",
            GranuleError::StillMapped(_) => "still-mapped",
            GranuleError::StillShared(_) => "still-shared",
            GranuleError::GptFault(_) => "gpt-fault",
            GranuleError::OutOfBounds { .. } => "out-of-bounds",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Granule {
    pub id: GranuleId,
    pub owner: WorldId,
    pub pas: Pas,
    pub shared_with: BTreeSet<WorldId>,
    contents: Box<[u8]>,
    /// Number of leaf entries, across all translation trees, referencing this granule.
    map_refs: u32,
    /// Set while the granule backs a translation-tree node.
    rtt_node: bool,
}

impl Granule {
    pub fn contents(&self) -> &[u8] {
        &self.contents
    }

    pub fn map_refs(&self) -> u32 {
        self.map_refs
    }

    pub fn is_rtt_node(&self) -> bool {
        self.rtt_node
    }
}

#[derive(Debug, Clone)]
pub struct GranuleSpace {
    granules: Vec<Granule>,
    wipe_on_release: bool,
}

impl GranuleSpace {
    pub fn new(pool_size: usize) -> Self {
        let granules = (0..pool_size)
            .map(|i| Granule {
                id: GranuleId(i as u32),
                owner: WorldId::NormalWorld,
                pas: Pas::Normal,
                shared_with: BTreeSet::new(),
                contents: vec![0u8; GRANULE_SIZE].into_boxed_slice(),
                map_refs: 0,
                rtt_node: false,
            })
            .collect();
        Self {
            granules,
            wipe_on_release: true,
        }
    }

    /// Disables the scrub on release. Only used to demonstrate that the
    /// temporal-isolation checks notice when the scrub is missing.
    pub fn set_wipe_on_release(&mut self, wipe: bool) {
        self.wipe_on_release = wipe;
    }

    pub fn pool_size(&self) -> usize {
        self.granules.len()
    }

    pub fn get(&self, g: GranuleId) -> Result<&Granule, GranuleError> {
        self.granules
            .get(g.0 as usize)
            .ok_or(GranuleError::UnknownGranule(g))
    }

    fn get_mut(&mut self, g: GranuleId) -> Result<&mut Granule, GranuleError> {
        self.granules
            .get_mut(g.0 as usize)
            .ok_or(GranuleError::UnknownGranule(g))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Granule> {
        self.granules.iter()
    }

    pub fn owner(&self, g: GranuleId) -> Result<WorldId, GranuleError> {
        Ok(self.get(g)?.owner)
    }

    pub fn free_count(&self) -> usize {
        self.granules
            .iter()
            .filter(|g| g.owner == WorldId::NormalWorld)
            .count()
    }

    /// Lowest-numbered `n` host-owned granules, or `None` if fewer exist.
    pub fn find_free(&self, n: usize) -> Option<Vec<GranuleId>> {
        let v: Vec<_> = self
            .granules
            .iter()
            .filter(|g| g.owner == WorldId::NormalWorld)
            .take(n)
            .map(|g| g.id)
            .collect();
        (v.len() == n).then_some(v)
    }

    pub fn delegate(
        &mut self,
        g: GranuleId,
        to: WorldId,
        trace: &mut Trace,
    ) -> Result<(), GranuleError> {
        let res = self.delegate_inner(g, to);
        let outcome = match &res {
            Ok(()) => GranuleOutcome::Owner(to),
            Err(e) => GranuleOutcome::Error(e.tag()),
        };
        trace.emit(Event::Granule {
            op: GranuleOp::Delegate,
            granule: g,
            accessor: WorldId::Root,
            outcome,
        });
        res
    }

    fn delegate_inner(&mut self, g: GranuleId, to: WorldId) -> Result<(), GranuleError> {
        if !to.is_realm() {
            return Err(GranuleError::InvalidTarget(to));
        }
        let gr = self.get_mut(g)?;
        if gr.owner != WorldId::NormalWorld {
            return Err(GranuleError::AlreadyDelegated {
                granule: g,
                owner: gr.owner,
            });
        }
        gr.owner = to;
        gr.pas = to.pas();
        Ok(())
    }

    /// Returns a realm granule to the host. Contents are scrubbed before the
    /// owner changes.
    pub fn undelegate(&mut self, g: GranuleId, trace: &mut Trace) -> Result<(), GranuleError> {
        let res = self.undelegate_inner(g);
        let outcome = match &res {
            Ok(()) => GranuleOutcome::Owner(WorldId::NormalWorld),
            Err(e) => GranuleOutcome::Error(e.tag()),
        };
        trace.emit(Event::Granule {
            op: GranuleOp::Undelegate,
            granule: g,
            accessor: WorldId::Root,
            outcome,
        });
        res
    }

    fn undelegate_inner(&mut self, g: GranuleId) -> Result<(), GranuleError> {
        let wipe = self.wipe_on_release;
        let gr = self.get_mut(g)?;
        if !gr.owner.is_realm() {
            return Err(GranuleError::NotDelegated(g));
        }
        if gr.map_refs > 0 || gr.rtt_node {
            return Err(GranuleError::StillMapped(g));
        }
        if !gr.shared_with.is_empty() {
            return Err(GranuleError::StillShared(g));
        }
        if wipe {
            gr.contents.fill(0);
        }
        gr.owner = WorldId::NormalWorld;
        gr.pas = Pas::Normal;
        Ok(())
    }

    /// Moves a realm granule to another realm. Monitor-internal; used when a
    /// container's memory leaves the System Realm's view during creation.
    pub fn transfer(
        &mut self,
        g: GranuleId,
        to: WorldId,
        trace: &mut Trace,
    ) -> Result<(), GranuleError> {
        let res = (|| {
            if !to.is_realm() {
                return Err(GranuleError::InvalidTarget(to));
            }
            let gr = self.get_mut(g)?;
            if !gr.owner.is_realm() {
                return Err(GranuleError::NotDelegated(g));
            }
            if !gr.shared_with.is_empty() {
                return Err(GranuleError::StillShared(g));
            }
            gr.owner = to;
            gr.pas = to.pas();
            Ok(())
        })();
        let outcome = match &res {
            Ok(()) => GranuleOutcome::Owner(to),
            Err(e) => GranuleOutcome::Error(e.tag()),
        };
        trace.emit(Event::Granule {
            op: GranuleOp::Transfer,
            granule: g,
            accessor: WorldId::Root,
            outcome,
        });
        res
    }

    pub fn share(
        &mut self,
        g: GranuleId,
        with: WorldId,
        trace: &mut Trace,
    ) -> Result<(), GranuleError> {
        let gr = self.get_mut(g)?;
        if !gr.owner.is_realm() {
            return Err(GranuleError::NotDelegated(g));
        }
        gr.shared_with.insert(with);
        let set = gr.shared_with.iter().copied().collect();
        trace.emit(Event::Granule {
            op: GranuleOp::Share,
            granule: g,
            accessor: WorldId::Root,
            outcome: GranuleOutcome::SharedWith(set),
        });
        Ok(())
    }

    pub fn unshare(&mut self, g: GranuleId, trace: &mut Trace) -> Result<(), GranuleError> {
        let gr = self.get_mut(g)?;
        gr.shared_with.clear();
        trace.emit(Event::Granule {
            op: GranuleOp::Unshare,
            granule: g,
            accessor: WorldId::Root,
            outcome: GranuleOutcome::SharedWith(Vec::new()),
        });
        Ok(())
    }

    /// Pure form of [`GranuleSpace::check_access`]: nothing is recorded.
    pub fn permits(&self, accessor: WorldId, g: GranuleId, kind: AccessKind) -> AccessOutcome {
        match self.get(g) {
            Ok(gr) if gr.owner == accessor => AccessOutcome::Allowed,
            Ok(gr)
                if kind != AccessKind::Exec
                    && gr.shared_with.contains(&accessor)
                    && gr.owner.is_realm() =>
            {
                AccessOutcome::Allowed
            }
            _ => AccessOutcome::GptFault,
        }
    }

    /// The protection-table check. Faults, and every access made by a
    /// non-realm world, are recorded in the trace.
    pub fn check_access(
        &self,
        accessor: WorldId,
        g: GranuleId,
        kind: AccessKind,
        trace: &mut Trace,
    ) -> AccessOutcome {
        let outcome = self.permits(accessor, g, kind);
        if outcome == AccessOutcome::GptFault || !accessor.is_realm() {
            trace.emit(Event::Granule {
                op: GranuleOp::Check(kind),
                granule: g,
                accessor,
                outcome: match outcome {
                    AccessOutcome::Allowed => GranuleOutcome::Allowed,
                    AccessOutcome::GptFault => GranuleOutcome::GptFault,
                },
            });
        }
        outcome
    }

    fn bounds(offset: usize, len: usize) -> Result<(), GranuleError> {
        if offset.checked_add(len).is_none_or(|end| end > GRANULE_SIZE) {
            return Err(GranuleError::OutOfBounds { offset, len });
        }
        Ok(())
    }

    pub fn read(
        &self,
        accessor: WorldId,
        g: GranuleId,
        offset: usize,
        len: usize,
        trace: &mut Trace,
    ) -> Result<Vec<u8>, GranuleError> {
        Self::bounds(offset, len)?;
        match self.check_access(accessor, g, AccessKind::Read, trace) {
            AccessOutcome::Allowed => Ok(self.get(g)?.contents[offset..offset + len].to_vec()),
            AccessOutcome::GptFault => Err(GranuleError::GptFault(g)),
        }
    }

    pub fn write(
        &mut self,
        accessor: WorldId,
        g: GranuleId,
        offset: usize,
        data: &[u8],
        trace: &mut Trace,
    ) -> Result<(), GranuleError> {
        Self::bounds(offset, data.len())?;
        match self.check_access(accessor, g, AccessKind::Write, trace) {
            AccessOutcome::Allowed => {
                self.get_mut(g)?.contents[offset..offset + data.len()].copy_from_slice(data);
                Ok(())
            }
            AccessOutcome::GptFault => Err(GranuleError::GptFault(g)),
        }
    }

    /// Monitor read: the root PAS reaches every granule, no protection check.
    pub fn monitor_read(
        &self,
        g: GranuleId,
        offset: usize,
        len: usize,
    ) -> Result<Vec<u8>, GranuleError> {
        Self::bounds(offset, len)?;
        Ok(self.get(g)?.contents[offset..offset + len].to_vec())
    }

    pub fn monitor_write(
        &mut self,
        g: GranuleId,
        offset: usize,
        data: &[u8],
    ) -> Result<(), GranuleError> {
        Self::bounds(offset, data.len())?;
        self.get_mut(g)?.contents[offset..offset + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn add_map_ref(&mut self, g: GranuleId) -> Result<(), GranuleError> {
        self.get_mut(g)?.map_refs += 1;
        Ok(())
    }

    pub(crate) fn drop_map_ref(&mut self, g: GranuleId) -> Result<(), GranuleError> {
        let gr = self.get_mut(g)?;
        gr.map_refs = gr.map_refs.saturating_sub(1);
        Ok(())
    }

    pub(crate) fn set_rtt_node(&mut self, g: GranuleId, node: bool) -> Result<(), GranuleError> {
        self.get_mut(g)?.rtt_node = node;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn c(id: u32) -> WorldId {
        WorldId::ContainerRealm(RealmId(id))
    }

    #[test]
    fn delegate_moves_host_granule_to_realm() {
        let mut gs = GranuleSpace::new(16);
        let mut t = Trace::new();
        gs.delegate(GranuleId(5), WorldId::SystemRealm, &mut t)
            .unwrap();
        assert_eq!(gs.owner(GranuleId(5)).unwrap(), WorldId::SystemRealm);
        assert_eq!(gs.get(GranuleId(5)).unwrap().pas, Pas::Realm);
    }

    #[test]
    fn delegate_twice_is_rejected() {
        let mut gs = GranuleSpace::new(16);
        let mut t = Trace::new();
        gs.delegate(GranuleId(5), WorldId::SystemRealm, &mut t)
            .unwrap();
        let err = gs.delegate(GranuleId(5), c(1), &mut t).unwrap_err();
        assert!(matches!(err, GranuleError::AlreadyDelegated { .. }));
        assert_eq!(
            gs.delegate(GranuleId(99), c(1), &mut t),
            Err(GranuleError::UnknownGranule(GranuleId(99)))
        );
        assert_eq!(
            gs.delegate(GranuleId(1), WorldId::NormalWorld, &mut t),
            Err(GranuleError::InvalidTarget(WorldId::NormalWorld))
        );
    }

    #[test]
    fn undelegate_scrubs_before_release() {
        let mut gs = GranuleSpace::new(4);
        let mut t = Trace::new();
        let g = GranuleId(2);
        gs.delegate(g, c(1), &mut t).unwrap();
        gs.write(c(1), g, 0, &[0xAB; GRANULE_SIZE], &mut t).unwrap();
        gs.undelegate(g, &mut t).unwrap();
        let back = gs
            .read(WorldId::NormalWorld, g, 0, GRANULE_SIZE, &mut t)
            .unwrap();
        assert!(back.iter().all(|&b| b == 0));
    }

    #[test]
    fn undelegate_refuses_mapped_or_shared() {
        let mut gs = GranuleSpace::new(4);
        let mut t = Trace::new();
        let g = GranuleId(1);
        gs.delegate(g, c(1), &mut t).unwrap();
        gs.add_map_ref(g).unwrap();
        assert_eq!(gs.undelegate(g, &mut t), Err(GranuleError::StillMapped(g)));
        gs.drop_map_ref(g).unwrap();
        gs.share(g, WorldId::SystemRealm, &mut t).unwrap();
        assert_eq!(gs.undelegate(g, &mut t), Err(GranuleError::StillShared(g)));
        gs.unshare(g, &mut t).unwrap();
        gs.undelegate(g, &mut t).unwrap();
        assert_eq!(gs.undelegate(g, &mut t), Err(GranuleError::NotDelegated(g)));
    }

    #[test]
    fn host_cannot_touch_realm_memory() {
        let mut gs = GranuleSpace::new(8);
        let mut t = Trace::new();
        gs.delegate(GranuleId(3), c(2), &mut t).unwrap();
        for kind in [AccessKind::Read, AccessKind::Write, AccessKind::Exec] {
            assert_eq!(
                gs.check_access(WorldId::NormalWorld, GranuleId(3), kind, &mut t),
                AccessOutcome::GptFault
            );
            assert_eq!(
                gs.check_access(WorldId::Secure, GranuleId(3), kind, &mut t),
                AccessOutcome::GptFault
            );
            assert_eq!(
                gs.check_access(c(2), GranuleId(3), kind, &mut t),
                AccessOutcome::Allowed
            );
        }
        // Every fault is in the trace.
        let faults = t
            .records()
            .iter()
            .filter(|r| r.to_string().ends_with("gpt-fault"))
            .count();
        assert_eq!(faults, 6);
    }

    #[test]
    fn sharing_grants_data_access_but_not_exec() {
        let mut gs = GranuleSpace::new(8);
        let mut t = Trace::new();
        let g = GranuleId(4);
        gs.delegate(g, c(1), &mut t).unwrap();
        gs.share(g, WorldId::SystemRealm, &mut t).unwrap();
        assert_eq!(
            gs.check_access(WorldId::SystemRealm, g, AccessKind::Write, &mut t),
            AccessOutcome::Allowed
        );
        assert_eq!(
            gs.check_access(WorldId::SystemRealm, g, AccessKind::Exec, &mut t),
            AccessOutcome::GptFault
        );
        assert_eq!(
            gs.check_access(WorldId::SystemRealm, GranuleId(5), AccessKind::Read, &mut t),
            AccessOutcome::GptFault
        );
    }

    #[test]
    fn trace_line_field_order() {
        let mut gs = GranuleSpace::new(8);
        let mut t = Trace::new();
        gs.delegate(GranuleId(5), WorldId::SystemRealm, &mut t)
            .unwrap();
        gs.check_access(WorldId::NormalWorld, GranuleId(5), AccessKind::Read, &mut t);
        let text = t.render();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "000000 delegate g5 root owner=system");
        assert_eq!(lines[1], "000001 check.read g5 normal gpt-fault");
    }

    /// Random delegate/undelegate traffic replayed against an independent
    /// id -> owner map.
    #[test]
    fn ownership_fuzz_matches_reference_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 32u32;
        let mut gs = GranuleSpace::new(n as usize);
        let mut t = Trace::new();
        let mut reference: BTreeMap<u32, WorldId> =
            (0..n).map(|i| (i, WorldId::NormalWorld)).collect();
        for _ in 0..1000 {
            let g = rng.gen_range(0..n);
            if rng.gen_bool(0.5) {
                let to = match rng.gen_range(0..3) {
                    0 => WorldId::SystemRealm,
                    k => c(k),
                };
                let ok = gs.delegate(GranuleId(g), to, &mut t).is_ok();
                let expect = reference[&g] == WorldId::NormalWorld;
                assert_eq!(ok, expect);
                if ok {
                    reference.insert(g, to);
                }
            } else {
                let ok = gs.undelegate(GranuleId(g), &mut t).is_ok();
                let expect = reference[&g] != WorldId::NormalWorld;
                assert_eq!(ok, expect);
                if ok {
                    reference.insert(g, WorldId::NormalWorld);
                }
            }
            for (id, owner) in &reference {
                assert_eq!(gs.owner(GranuleId(*id)).unwrap(), *owner);
            }
        }
    }
}
