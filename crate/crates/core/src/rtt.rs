// SPDX-License-Identifier: Apache-2.0

//! Stage-2 translation trees.
//!
//! Every tree belongs to one realm. Nodes are backed by granules delegated to
//! that realm and handed in through a [`NodePool`]; leaf entries point at data
//! granules. Trees can be cloned into a structurally independent copy and have
//! IPA ranges revoked in place, which is how a container gets a private view
//! while the System Realm loses access to the container's pages.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::granule::{
    AccessKind, AccessOutcome, GranuleError, GranuleId, GranuleSpace, WorldId, GRANULE_SHIFT,
    GRANULE_SIZE,
};
use crate::trace::{Event, Trace};

pub const ENTRIES_PER_NODE: usize = 512;
pub const INDEX_BITS: u32 = 9;
pub const DEFAULT_LEVELS: u8 = 3;

/// Free granules, already delegated to the tree's realm, that node allocation
/// draws from in order.
pub type NodePool = VecDeque<GranuleId>;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct Ipa(pub u64);

impl Ipa {
    pub fn page(self) -> Ipa {
        Ipa(self.0 & !(GRANULE_SIZE as u64 - 1))
    }

    pub fn page_offset(self) -> usize {
        (self.0 & (GRANULE_SIZE as u64 - 1)) as usize
    }

    pub fn is_page_aligned(self) -> bool {
        self.page_offset() == 0
    }

    pub fn add(self, bytes: u64) -> Ipa {
        Ipa(self.0 + bytes)
    }
}

impl fmt::Display for Ipa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Perms {
    pub const R: Perms = Perms {
        read: true,
        write: false,
        exec: false,
    };
    pub const RW: Perms = Perms {
        read: true,
        write: true,
        exec: false,
    };
    pub const RWX: Perms = Perms {
        read: true,
        write: true,
        exec: true,
    };

    pub fn permits(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
            AccessKind::Exec => self.exec,
        }
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |on, c| if on { c } else { '-' };
        write!(
            f,
            "{}{}{}",
            flag(self.read, 'r'),
            flag(self.write, 'w'),
            flag(self.exec, 'x')
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RttEntry {
    Unassigned,
    /// Previously assigned; the granule reference is dropped.
    AssignedEmpty,
    Assigned {
        granule: GranuleId,
        perms: Perms,
    },
    Table(GranuleId),
}

impl fmt::Display for RttEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RttEntry::Unassigned => f.write_str("unassigned"),
            RttEntry::AssignedEmpty => f.write_str("assigned-empty"),
            RttEntry::Assigned { granule, perms } => write!(f, "assigned {granule} {perms}"),
            RttEntry::Table(g) => write!(f, "table {g}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage2Fault {
    Unmapped,
    Empty,
    PermDenied,
    GptDenied,
}

impl fmt::Display for Stage2Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage2Fault::Unmapped => "unmapped",
            Stage2Fault::Empty => "empty",
            Stage2Fault::PermDenied => "perm-denied",
            Stage2Fault::GptDenied => "gpt-denied",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Walk {
    Translated { granule: GranuleId, offset: usize },
    Fault(Stage2Fault),
}

impl Walk {
    pub fn is_translated(self) -> bool {
        matches!(self, Walk::Translated { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RttError {
    #[error("translation-tree node pool exhausted")]
    OutOfRttGranules,
    #[error("{granule} is neither owned by nor shared with {realm}")]
    NotOwner { granule: GranuleId, realm: WorldId },
    #[error("{0} is already mapped")]
    AlreadyMapped(Ipa),
    #[error("{0} is outside the translatable range")]
    OutOfRange(Ipa),
    #[error("{0} is not page aligned")]
    Misaligned(Ipa),
    #[error("tree depth {0} unsupported (2..=4)")]
    InvalidLevels(u8),
    #[error(transparent)]
    Granule(#[from] GranuleError),
}

#[derive(Debug, Clone)]
struct Node {
    level: u8,
    entries: Vec<RttEntry>,
}

impl Node {
    fn new(level: u8) -> Self {
        Self {
            level,
            entries: vec![RttEntry::Unassigned; ENTRIES_PER_NODE],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RttTree {
    realm: WorldId,
    levels: u8,
    root: GranuleId,
    nodes: BTreeMap<GranuleId, Node>,
}

fn alloc_node(
    gs: &mut GranuleSpace,
    pool: &mut NodePool,
    realm: WorldId,
    allocated: &mut Vec<GranuleId>,
) -> Result<GranuleId, RttError> {
    while let Some(g) = pool.pop_front() {
        let gr = gs.get(g)?;
        if gr.owner == realm && !gr.is_rtt_node() && gr.map_refs() == 0 {
            gs.set_rtt_node(g, true)?;
            allocated.push(g);
            return Ok(g);
        }
    }
    Err(RttError::OutOfRttGranules)
}

impl RttTree {
    pub fn new(
        realm: WorldId,
        levels: u8,
        gs: &mut GranuleSpace,
        pool: &mut NodePool,
    ) -> Result<Self, RttError> {
        if !(2..=4).contains(&levels) {
            return Err(RttError::InvalidLevels(levels));
        }
        let mut allocated = Vec::new();
        let root = alloc_node(gs, pool, realm, &mut allocated)?;
        let mut nodes = BTreeMap::new();
        nodes.insert(root, Node::new(0));
        Ok(Self {
            realm,
            levels,
            root,
            nodes,
        })
    }

    pub fn realm(&self) -> WorldId {
        self.realm
    }

    pub fn levels(&self) -> u8 {
        self.levels
    }

    pub fn root(&self) -> GranuleId {
        self.root
    }

    /// Bytes spanned by one entry at `level`.
    pub fn entry_span(levels: u8, level: u8) -> u64 {
        1u64 << (GRANULE_SHIFT + INDEX_BITS * u32::from(levels - 1 - level))
    }

    /// Exclusive upper bound on translatable IPAs.
    pub fn ipa_limit(levels: u8) -> u64 {
        1u64 << (GRANULE_SHIFT + INDEX_BITS * u32::from(levels))
    }

    fn index(&self, ipa: Ipa, level: u8) -> usize {
        ((ipa.0 / Self::entry_span(self.levels, level)) as usize) % ENTRIES_PER_NODE
    }

    fn check_ipa(&self, ipa: Ipa) -> Result<(), RttError> {
        if ipa.0 >= Self::ipa_limit(self.levels) {
            return Err(RttError::OutOfRange(ipa));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_granules(&self) -> BTreeSet<GranuleId> {
        self.nodes.keys().copied().collect()
    }

    /// Number of table nodes below the root needed to cover `[start, end)`
    /// in a tree of the given depth.
    pub fn nodes_for_range(levels: u8, start: u64, end: u64) -> usize {
        if end <= start {
            return 0;
        }
        (1..levels)
            .map(|level| {
                let span = Self::entry_span(levels, level - 1);
                ((end - 1) / span - start / span + 1) as usize
            })
            .sum()
    }

    /// Leaf entry for `ipa`, or `None` if an intermediate table is missing.
    pub fn leaf(&self, ipa: Ipa) -> Option<RttEntry> {
        if ipa.0 >= Self::ipa_limit(self.levels) {
            return None;
        }
        let mut node = self.root;
        for level in 0..self.levels {
            let e = self.nodes[&node].entries[self.index(ipa, level)];
            if level + 1 == self.levels {
                return Some(e);
            }
            match e {
                RttEntry::Table(child) => node = child,
                _ => return None,
            }
        }
        None
    }

    fn leaf_mut(&mut self, ipa: Ipa) -> Option<&mut RttEntry> {
        let mut node = self.root;
        for level in 0..self.levels - 1 {
            match self.nodes[&node].entries[self.index(ipa, level)] {
                RttEntry::Table(child) => node = child,
                _ => return None,
            }
        }
        let idx = self.index(ipa, self.levels - 1);
        Some(&mut self.nodes.get_mut(&node).expect("node").entries[idx])
    }

    pub fn map(
        &mut self,
        gs: &mut GranuleSpace,
        pool: &mut NodePool,
        ipa: Ipa,
        granule: GranuleId,
        perms: Perms,
    ) -> Result<(), RttError> {
        self.check_ipa(ipa)?;
        if !ipa.is_page_aligned() {
            return Err(RttError::Misaligned(ipa));
        }
        let gr = gs.get(granule)?;
        if gr.owner != self.realm && !gr.shared_with.contains(&self.realm) {
            return Err(RttError::NotOwner {
                granule,
                realm: self.realm,
            });
        }
        if let Some(RttEntry::Assigned { .. }) = self.leaf(ipa) {
            return Err(RttError::AlreadyMapped(ipa));
        }
        let mut allocated = Vec::new();
        let mut node = self.root;
        for level in 0..self.levels - 1 {
            let idx = self.index(ipa, level);
            node = match self.nodes[&node].entries[idx] {
                RttEntry::Table(child) => child,
                _ => match alloc_node(gs, pool, self.realm, &mut allocated) {
                    Ok(child) => {
                        self.nodes.insert(child, Node::new(level + 1));
                        self.nodes.get_mut(&node).expect("node").entries[idx] =
                            RttEntry::Table(child);
                        child
                    }
                    Err(e) => {
                        self.rollback_tables(gs, pool, &allocated);
                        return Err(e);
                    }
                },
            };
        }
        let idx = self.index(ipa, self.levels - 1);
        self.nodes.get_mut(&node).expect("node").entries[idx] =
            RttEntry::Assigned { granule, perms };
        gs.add_map_ref(granule)?;
        Ok(())
    }

    /// Undo table nodes allocated by a failed map; they are empty by construction.
    fn rollback_tables(
        &mut self,
        gs: &mut GranuleSpace,
        pool: &mut NodePool,
        allocated: &[GranuleId],
    ) {
        let set: BTreeSet<_> = allocated.iter().copied().collect();
        for node in self.nodes.values_mut() {
            for e in node.entries.iter_mut() {
                if let RttEntry::Table(c) = e {
                    if set.contains(c) {
                        *e = RttEntry::Unassigned;
                    }
                }
            }
        }
        for g in allocated.iter().rev() {
            self.nodes.remove(g);
            let _ = gs.set_rtt_node(*g, false);
            pool.push_front(*g);
        }
    }

    /// Side-effect free translation, used for TLB comparisons.
    pub fn resolve(&self, gs: &GranuleSpace, ipa: Ipa, kind: AccessKind) -> Walk {
        match self.leaf(ipa) {
            None | Some(RttEntry::Unassigned) | Some(RttEntry::Table(_)) => {
                Walk::Fault(Stage2Fault::Unmapped)
            }
            Some(RttEntry::AssignedEmpty) => Walk::Fault(Stage2Fault::Empty),
            Some(RttEntry::Assigned { granule, perms }) => {
                if !perms.permits(kind) {
                    Walk::Fault(Stage2Fault::PermDenied)
                } else if gs.permits(self.realm, granule, kind) != AccessOutcome::Allowed {
                    Walk::Fault(Stage2Fault::GptDenied)
                } else {
                    Walk::Translated {
                        granule,
                        offset: ipa.page_offset(),
                    }
                }
            }
        }
    }

    /// Translation as the hardware walker performs it: faults are recorded.
    pub fn walk(&self, gs: &GranuleSpace, trace: &mut Trace, ipa: Ipa, kind: AccessKind) -> Walk {
        if let Some(RttEntry::Assigned { granule, perms }) = self.leaf(ipa) {
            if perms.permits(kind) {
                // Goes through the logged check so the GPT fault lands in the trace.
                gs.check_access(self.realm, granule, kind, trace);
            }
        }
        let w = self.resolve(gs, ipa, kind);
        if let Walk::Fault(reason) = w {
            trace.emit(Event::Stage2Fault {
                realm: self.realm,
                ipa,
                kind,
                reason,
            });
        }
        w
    }

    /// Full structural copy: data leaves reference the same granules, every
    /// table node is recreated in a granule drawn from `pool`.
    pub fn clone_tree(
        &self,
        gs: &mut GranuleSpace,
        pool: &mut NodePool,
        realm: WorldId,
    ) -> Result<RttTree, RttError> {
        self.clone_range(gs, pool, realm, 0, Self::ipa_limit(self.levels))
    }

    /// Copy restricted to `[start, end)`: entries outside the range are left
    /// unassigned and table nodes are only created along paths that reach it.
    pub fn clone_range(
        &self,
        gs: &mut GranuleSpace,
        pool: &mut NodePool,
        realm: WorldId,
        start: u64,
        end: u64,
    ) -> Result<RttTree, RttError> {
        let mut allocated = Vec::new();
        let mut refs = Vec::new();
        let result = (|| {
            let root = alloc_node(gs, pool, realm, &mut allocated)?;
            let mut out = RttTree {
                realm,
                levels: self.levels,
                root,
                nodes: BTreeMap::new(),
            };
            out.nodes.insert(root, Node::new(0));
            self.clone_node(
                gs,
                pool,
                &mut out,
                self.root,
                root,
                0,
                start,
                end,
                &mut allocated,
                &mut refs,
            )?;
            Ok(out)
        })();
        if result.is_err() {
            for g in refs {
                let _ = gs.drop_map_ref(g);
            }
            for g in allocated.into_iter().rev() {
                let _ = gs.set_rtt_node(g, false);
                pool.push_front(g);
            }
        }
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn clone_node(
        &self,
        gs: &mut GranuleSpace,
        pool: &mut NodePool,
        out: &mut RttTree,
        src: GranuleId,
        dst: GranuleId,
        base: u64,
        start: u64,
        end: u64,
        allocated: &mut Vec<GranuleId>,
        refs: &mut Vec<GranuleId>,
    ) -> Result<(), RttError> {
        let node = &self.nodes[&src];
        let span = Self::entry_span(self.levels, node.level);
        for (i, entry) in node.entries.iter().enumerate() {
            let lo = base + i as u64 * span;
            let hi = lo + span;
            if hi <= start || lo >= end {
                continue;
            }
            let copied = match *entry {
                RttEntry::Table(child) => {
                    let new_child = alloc_node(gs, pool, out.realm, allocated)?;
                    out.nodes.insert(new_child, Node::new(node.level + 1));
                    self.clone_node(
                        gs, pool, out, child, new_child, lo, start, end, allocated, refs,
                    )?;
                    RttEntry::Table(new_child)
                }
                RttEntry::Assigned { granule, .. } => {
                    gs.add_map_ref(granule)?;
                    refs.push(granule);
                    *entry
                }
                other => other,
            };
            out.nodes.get_mut(&dst).expect("node").entries[i] = copied;
        }
        Ok(())
    }

    /// Converts every assigned leaf in `[start, end)` to assigned-empty and
    /// returns how many were converted.
    pub fn revoke_range(
        &mut self,
        gs: &mut GranuleSpace,
        start: Ipa,
        end: Ipa,
    ) -> Result<usize, RttError> {
        if !start.is_page_aligned() {
            return Err(RttError::Misaligned(start));
        }
        if !end.is_page_aligned() {
            return Err(RttError::Misaligned(end));
        }
        let mut count = 0;
        let mut ipa = start.0;
        let limit = end.0.min(Self::ipa_limit(self.levels));
        while ipa < limit {
            if let Some(e) = self.leaf_mut(Ipa(ipa)) {
                if let RttEntry::Assigned { granule, .. } = *e {
                    *e = RttEntry::AssignedEmpty;
                    gs.drop_map_ref(granule)?;
                    count += 1;
                }
            }
            ipa += GRANULE_SIZE as u64;
        }
        Ok(count)
    }

    /// Clears the leaf for `ipa` back to unassigned; returns the granule that
    /// was mapped there, if any.
    pub fn unmap(
        &mut self,
        gs: &mut GranuleSpace,
        ipa: Ipa,
    ) -> Result<Option<GranuleId>, RttError> {
        let Some(e) = self.leaf_mut(ipa.page()) else {
            return Ok(None);
        };
        let prev = *e;
        *e = RttEntry::Unassigned;
        match prev {
            RttEntry::Assigned { granule, .. } => {
                gs.drop_map_ref(granule)?;
                Ok(Some(granule))
            }
            _ => Ok(None),
        }
    }

    /// Removes the subtree under root entry `index`, returning the node
    /// granules it used. Leaf references inside are dropped.
    pub fn release_root_entry(
        &mut self,
        gs: &mut GranuleSpace,
        index: usize,
    ) -> Result<Vec<GranuleId>, RttError> {
        let entry = std::mem::replace(
            &mut self.nodes.get_mut(&self.root).expect("root").entries[index],
            RttEntry::Unassigned,
        );
        let mut freed = Vec::new();
        match entry {
            RttEntry::Table(child) => self.release_subtree(gs, child, &mut freed)?,
            RttEntry::Assigned { granule, .. } => gs.drop_map_ref(granule)?,
            _ => {}
        }
        Ok(freed)
    }

    fn release_subtree(
        &mut self,
        gs: &mut GranuleSpace,
        node: GranuleId,
        freed: &mut Vec<GranuleId>,
    ) -> Result<(), RttError> {
        let n = self.nodes.remove(&node).expect("node");
        for e in n.entries {
            match e {
                RttEntry::Table(child) => self.release_subtree(gs, child, freed)?,
                RttEntry::Assigned { granule, .. } => gs.drop_map_ref(granule)?,
                _ => {}
            }
        }
        gs.set_rtt_node(node, false)?;
        freed.push(node);
        Ok(())
    }

    /// Dismantles the whole tree, returning every node granule.
    pub fn teardown(mut self, gs: &mut GranuleSpace) -> Result<Vec<GranuleId>, RttError> {
        let mut freed = Vec::new();
        let root = self.root;
        self.release_subtree(gs, root, &mut freed)?;
        Ok(freed)
    }

    /// All assigned leaves as `(ipa, granule, perms)`, in IPA order.
    pub fn mappings(&self) -> Vec<(Ipa, GranuleId, Perms)> {
        let mut out = Vec::new();
        self.collect(self.root, 0, &mut out);
        out
    }

    /// IPAs of leaves in a given state (assigned or assigned-empty), in order.
    pub fn leaves(&self) -> Vec<(Ipa, RttEntry)> {
        let mut out = Vec::new();
        self.collect_leaves(self.root, 0, &mut out);
        out
    }

    fn collect(&self, node: GranuleId, base: u64, out: &mut Vec<(Ipa, GranuleId, Perms)>) {
        let n = &self.nodes[&node];
        let span = Self::entry_span(self.levels, n.level);
        for (i, e) in n.entries.iter().enumerate() {
            let lo = base + i as u64 * span;
            match *e {
                RttEntry::Table(c) => self.collect(c, lo, out),
                RttEntry::Assigned { granule, perms } => out.push((Ipa(lo), granule, perms)),
                _ => {}
            }
        }
    }

    fn collect_leaves(&self, node: GranuleId, base: u64, out: &mut Vec<(Ipa, RttEntry)>) {
        let n = &self.nodes[&node];
        let span = Self::entry_span(self.levels, n.level);
        for (i, e) in n.entries.iter().enumerate() {
            let lo = base + i as u64 * span;
            match *e {
                RttEntry::Table(c) => self.collect_leaves(c, lo, out),
                RttEntry::Unassigned => {}
                other => out.push((Ipa(lo), other)),
            }
        }
    }

    /// Depth-first `level:index → entry` listing of every non-unassigned entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        self.dump_node(self.root, &mut out);
        out
    }

    fn dump_node(&self, node: GranuleId, out: &mut String) {
        let n = &self.nodes[&node];
        for (i, e) in n.entries.iter().enumerate() {
            if *e == RttEntry::Unassigned {
                continue;
            }
            let _ = writeln!(out, "{}:{} → {}", n.level, i, e);
            if let RttEntry::Table(c) = e {
                self.dump_node(*c, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granule::RealmId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    const SYS: WorldId = WorldId::SystemRealm;

    fn setup(
        pool_size: usize,
        realm: WorldId,
        delegated: std::ops::Range<u32>,
    ) -> (GranuleSpace, Trace, NodePool) {
        let mut gs = GranuleSpace::new(pool_size);
        let mut t = Trace::new();
        for i in delegated.clone() {
            gs.delegate(GranuleId(i), realm, &mut t).unwrap();
        }
        let pool = delegated.map(GranuleId).collect();
        (gs, t, pool)
    }

    #[test]
    fn map_then_walk() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..16);
        gs.delegate(GranuleId(40), SYS, &mut t).unwrap();
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        tree.map(&mut gs, &mut pool, Ipa(0x1000), GranuleId(40), Perms::RW)
            .unwrap();
        assert_eq!(
            tree.walk(&gs, &mut t, Ipa(0x1010), AccessKind::Read),
            Walk::Translated {
                granule: GranuleId(40),
                offset: 0x10
            }
        );
        assert_eq!(tree.node_count(), 3);
    }

    #[test]
    fn map_foreign_granule_is_not_owner() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..8);
        gs.delegate(GranuleId(50), WorldId::ContainerRealm(RealmId(1)), &mut t)
            .unwrap();
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        let err = tree
            .map(&mut gs, &mut pool, Ipa(0x2000), GranuleId(50), Perms::RW)
            .unwrap_err();
        assert!(matches!(err, RttError::NotOwner { .. }));
        let err = tree
            .map(&mut gs, &mut pool, Ipa(0x2000), GranuleId(51), Perms::RW)
            .unwrap_err();
        assert!(matches!(err, RttError::NotOwner { .. }));
    }

    #[test]
    fn map_twice_and_misaligned() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..8);
        for g in [40, 41] {
            gs.delegate(GranuleId(g), SYS, &mut t).unwrap();
        }
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        tree.map(&mut gs, &mut pool, Ipa(0x3000), GranuleId(40), Perms::RW)
            .unwrap();
        assert_eq!(
            tree.map(&mut gs, &mut pool, Ipa(0x3000), GranuleId(41), Perms::RW),
            Err(RttError::AlreadyMapped(Ipa(0x3000)))
        );
        assert_eq!(
            tree.map(&mut gs, &mut pool, Ipa(0x3004), GranuleId(41), Perms::RW),
            Err(RttError::Misaligned(Ipa(0x3004)))
        );
        assert!(matches!(
            tree.map(&mut gs, &mut pool, Ipa(1 << 39), GranuleId(41), Perms::RW),
            Err(RttError::OutOfRange(_))
        ));
    }

    #[test]
    fn exhausted_pool_rolls_back_partial_tables() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..2);
        gs.delegate(GranuleId(40), SYS, &mut t).unwrap();
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        // root uses one granule, one left: a 3-level map needs two tables.
        let err = tree
            .map(&mut gs, &mut pool, Ipa(0), GranuleId(40), Perms::RW)
            .unwrap_err();
        assert_eq!(err, RttError::OutOfRttGranules);
        assert_eq!(tree.node_count(), 1);
        assert_eq!(pool.len(), 1);
        assert!(!gs.get(GranuleId(1)).unwrap().is_rtt_node());
        assert_eq!(tree.dump(), "");
    }

    #[test]
    fn walk_fault_reasons() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..8);
        gs.delegate(GranuleId(40), SYS, &mut t).unwrap();
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        assert_eq!(
            tree.walk(&gs, &mut t, Ipa(0x5000), AccessKind::Read),
            Walk::Fault(Stage2Fault::Unmapped)
        );
        tree.map(&mut gs, &mut pool, Ipa(0x5000), GranuleId(40), Perms::R)
            .unwrap();
        assert_eq!(
            tree.walk(&gs, &mut t, Ipa(0x5000), AccessKind::Write),
            Walk::Fault(Stage2Fault::PermDenied)
        );
        assert_eq!(
            tree.revoke_range(&mut gs, Ipa(0x5000), Ipa(0x6000))
                .unwrap(),
            1
        );
        assert_eq!(
            tree.walk(&gs, &mut t, Ipa(0x5000), AccessKind::Read),
            Walk::Fault(Stage2Fault::Empty)
        );
        assert!(t.render().contains("s2fault system ipa=0x5000 read empty"));
    }

    #[test]
    fn walk_reports_gpt_denial_after_ownership_moves() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..8);
        gs.delegate(GranuleId(40), SYS, &mut t).unwrap();
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        tree.map(&mut gs, &mut pool, Ipa(0x5000), GranuleId(40), Perms::RW)
            .unwrap();
        gs.transfer(GranuleId(40), WorldId::ContainerRealm(RealmId(1)), &mut t)
            .unwrap();
        assert_eq!(
            tree.walk(&gs, &mut t, Ipa(0x5000), AccessKind::Read),
            Walk::Fault(Stage2Fault::GptDenied)
        );
    }

    #[test]
    fn revoke_counts_only_assigned() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..8);
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        assert_eq!(tree.revoke_range(&mut gs, Ipa(0), Ipa(0x4000)).unwrap(), 0);
        for (i, g) in [40u32, 41, 43].iter().enumerate() {
            gs.delegate(GranuleId(*g), SYS, &mut t).unwrap();
            let ipa = [0x0, 0x1000, 0x3000][i];
            tree.map(&mut gs, &mut pool, Ipa(ipa), GranuleId(*g), Perms::RW)
                .unwrap();
        }
        assert_eq!(tree.revoke_range(&mut gs, Ipa(0), Ipa(0x4000)).unwrap(), 3);
        for ipa in [0x0, 0x1000, 0x3000] {
            assert_eq!(
                tree.walk(&gs, &mut t, Ipa(ipa), AccessKind::Read),
                Walk::Fault(Stage2Fault::Empty)
            );
        }
        assert_eq!(
            tree.walk(&gs, &mut t, Ipa(0x2000), AccessKind::Read),
            Walk::Fault(Stage2Fault::Unmapped)
        );
        assert_eq!(
            tree.revoke_range(&mut gs, Ipa(1), Ipa(0x4000)),
            Err(RttError::Misaligned(Ipa(1)))
        );
        // Assigned-empty leaves can be mapped again.
        tree.map(&mut gs, &mut pool, Ipa(0x1000), GranuleId(41), Perms::RW)
            .unwrap();
        assert!(tree
            .walk(&gs, &mut t, Ipa(0x1000), AccessKind::Read)
            .is_translated());
    }

    /// 64 random (ipa, granule) pairs checked against a flat dictionary.
    #[test]
    fn random_maps_agree_with_reference_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let (mut gs, mut t, mut pool) = setup(256, SYS, 0..64);
        for g in 100..164 {
            gs.delegate(GranuleId(g), SYS, &mut t).unwrap();
        }
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        let mut reference: HashMap<u64, (GranuleId, Perms)> = HashMap::new();
        let mut g = 100;
        while reference.len() < 64 {
            // Clustered so several pairs share tables.
            let ipa = (rng.gen_range(0..4u64) << 30) | (rng.gen_range(0..1024u64) << 12);
            if reference.contains_key(&ipa) {
                continue;
            }
            let perms = if rng.gen_bool(0.5) {
                Perms::RW
            } else {
                Perms::R
            };
            tree.map(&mut gs, &mut pool, Ipa(ipa), GranuleId(g), perms)
                .unwrap();
            reference.insert(ipa, (GranuleId(g), perms));
            g += 1;
        }
        for (ipa, (granule, perms)) in &reference {
            assert_eq!(
                tree.walk(&gs, &mut t, Ipa(*ipa), AccessKind::Read),
                Walk::Translated {
                    granule: *granule,
                    offset: 0
                }
            );
            let w = tree.walk(&gs, &mut t, Ipa(*ipa), AccessKind::Write);
            assert_eq!(w.is_translated(), perms.write);
        }
        assert_eq!(tree.mappings().len(), 64);
    }

    #[test]
    fn clone_of_empty_tree() {
        let (mut gs, _t, mut pool) = setup(64, SYS, 0..8);
        let tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        let c = tree.clone_tree(&mut gs, &mut pool, SYS).unwrap();
        assert_eq!(c.node_count(), tree.node_count());
        assert!(c.node_granules().is_disjoint(&tree.node_granules()));
        assert!(c.mappings().is_empty());
    }

    #[test]
    fn clone_is_structurally_independent() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..16);
        for g in 40..44 {
            gs.delegate(GranuleId(g), SYS, &mut t).unwrap();
        }
        let mut src = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        src.map(&mut gs, &mut pool, Ipa(0x1000), GranuleId(40), Perms::RW)
            .unwrap();
        src.map(
            &mut gs,
            &mut pool,
            Ipa(0x4000_0000),
            GranuleId(41),
            Perms::RWX,
        )
        .unwrap();
        let copy = src.clone_tree(&mut gs, &mut pool, SYS).unwrap();
        assert_eq!(copy.node_count(), src.node_count());
        assert!(copy.node_granules().is_disjoint(&src.node_granules()));
        for (ipa, _, _) in src.mappings() {
            assert_eq!(
                copy.walk(&gs, &mut t, ipa, AccessKind::Read),
                src.walk(&gs, &mut t, ipa, AccessKind::Read)
            );
        }
        src.map(&mut gs, &mut pool, Ipa(0x2000), GranuleId(42), Perms::RW)
            .unwrap();
        assert_eq!(
            copy.walk(&gs, &mut t, Ipa(0x2000), AccessKind::Read),
            Walk::Fault(Stage2Fault::Unmapped)
        );
        assert_eq!(gs.get(GranuleId(40)).unwrap().map_refs(), 2);
    }

    #[test]
    fn clone_failure_rolls_back() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..6);
        for g in 40..42 {
            gs.delegate(GranuleId(g), SYS, &mut t).unwrap();
        }
        let mut src = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        src.map(&mut gs, &mut pool, Ipa(0x1000), GranuleId(40), Perms::RW)
            .unwrap();
        src.map(
            &mut gs,
            &mut pool,
            Ipa(0x4000_0000),
            GranuleId(41),
            Perms::RW,
        )
        .unwrap();
        // Five nodes in the source, one free granule left.
        assert_eq!(src.node_count(), 5);
        assert_eq!(pool.len(), 1);
        let err = src.clone_tree(&mut gs, &mut pool, SYS).unwrap_err();
        assert_eq!(err, RttError::OutOfRttGranules);
        assert_eq!(pool.len(), 1);
        assert_eq!(gs.get(GranuleId(40)).unwrap().map_refs(), 1);
        assert!(!gs.get(pool[0]).unwrap().is_rtt_node());
    }

    #[test]
    fn clone_range_keeps_only_the_window() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..16);
        for g in 40..44 {
            gs.delegate(GranuleId(g), SYS, &mut t).unwrap();
        }
        let mut src = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        src.map(&mut gs, &mut pool, Ipa(0x1000), GranuleId(40), Perms::RW)
            .unwrap();
        src.map(
            &mut gs,
            &mut pool,
            Ipa(0x4000_0000),
            GranuleId(41),
            Perms::RW,
        )
        .unwrap();
        src.map(
            &mut gs,
            &mut pool,
            Ipa(0x4000_1000),
            GranuleId(42),
            Perms::RW,
        )
        .unwrap();
        let c = src
            .clone_range(&mut gs, &mut pool, SYS, 0x4000_0000, 0x8000_0000)
            .unwrap();
        assert_eq!(
            c.node_count(),
            1 + RttTree::nodes_for_range(3, 0x4000_0000, 0x4000_2000)
        );
        assert_eq!(c.mappings().len(), 2);
        assert_eq!(
            c.walk(&gs, &mut t, Ipa(0x1000), AccessKind::Read),
            Walk::Fault(Stage2Fault::Unmapped)
        );
    }

    #[test]
    fn nodes_for_range_counts() {
        assert_eq!(RttTree::nodes_for_range(3, 0, 0x1000), 2);
        assert_eq!(RttTree::nodes_for_range(3, 0, 513 * 0x1000), 3);
        assert_eq!(RttTree::nodes_for_range(2, 0, 0x1000), 1);
        assert_eq!(RttTree::nodes_for_range(4, 0, 0x1000), 3);
        assert_eq!(RttTree::nodes_for_range(3, 0, 0), 0);
    }

    #[test]
    fn release_and_teardown_return_nodes() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..16);
        gs.delegate(GranuleId(40), SYS, &mut t).unwrap();
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        tree.map(
            &mut gs,
            &mut pool,
            Ipa(0x4000_0000),
            GranuleId(40),
            Perms::RW,
        )
        .unwrap();
        let freed = tree.release_root_entry(&mut gs, 1).unwrap();
        assert_eq!(freed.len(), 2);
        assert_eq!(gs.get(GranuleId(40)).unwrap().map_refs(), 0);
        assert_eq!(tree.node_count(), 1);
        let all = tree.teardown(&mut gs).unwrap();
        assert_eq!(all.len(), 1);
        for g in freed.iter().chain(all.iter()) {
            gs.undelegate(*g, &mut t).unwrap();
        }
    }

    #[test]
    fn dump_is_depth_first() {
        let (mut gs, mut t, mut pool) = setup(64, SYS, 0..8);
        gs.delegate(GranuleId(40), SYS, &mut t).unwrap();
        gs.delegate(GranuleId(41), SYS, &mut t).unwrap();
        let mut tree = RttTree::new(SYS, 3, &mut gs, &mut pool).unwrap();
        tree.map(&mut gs, &mut pool, Ipa(0x1000), GranuleId(40), Perms::RW)
            .unwrap();
        tree.map(&mut gs, &mut pool, Ipa(0x2000), GranuleId(41), Perms::R)
            .unwrap();
        tree.revoke_range(&mut gs, Ipa(0x2000), Ipa(0x3000))
            .unwrap();
        let expected =
            "0:0 → table g1\n1:0 → table g2\n2:1 → assigned g40 rw-\n2:2 → assigned-empty\n";
        assert_eq!(tree.dump(), expected);
    }
}
