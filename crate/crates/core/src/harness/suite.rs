// SPDX-License-Identifier: Apache-2.0

//! Property suites behind `suite` and the acceptance tests. Each check
//! returns its raw counts so callers can compare them with their own
//! expectations; [`run_suite`] folds them into a pass/fail matrix keyed by
//! invariant name.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coherence::MaintenanceSite;
use crate::cpu::{Arg, Sysno};
use crate::granule::{
    AccessKind, AccessOutcome, GranuleId, GranuleSpace, RealmId, WorldId, GRANULE_SIZE,
};
use crate::host::{AdversaryAction, Effect, StoreTarget};
use crate::rmm::{
    ExitReason, Flag, Mutation, Mutations, SyscallReply, SystemRealmConfig, World, WorldConfig,
};
use crate::rtt::{Ipa, NodePool, Perms, RttEntry, RttTree, Stage2Fault, Walk};
use crate::system_realm::CreateRequest;
use crate::trace::{Event, Trace};

use super::adversary::{self, ActionOutcome};
use super::audit::{self, Finding};
use super::lifecycle::run_lifecycle;
use super::metrics::Metrics;
use super::run::{execute, image_for};
use super::scenario::{self, layout, ProgramBuilder, Scenario};
use super::HarnessError;

/// Problem sizes for one suite run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Scale {
    pub ownership_ops: usize,
    pub rtt_shapes: usize,
    pub iago_replies: usize,
    pub tamper_seeds: u64,
    pub adversary_scripts: u64,
}

impl Scale {
    pub const FULL: Scale = Scale {
        ownership_ops: 10_000,
        rtt_shapes: 200,
        iago_replies: 10_000,
        tamper_seeds: 20,
        adversary_scripts: 1000,
    };

    pub const QUICK: Scale = Scale {
        ownership_ops: 2000,
        rtt_shapes: 40,
        iago_replies: 2000,
        tamper_seeds: 5,
        adversary_scripts: 100,
    };
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seed: u64,
    pub mutation: Option<Mutation>,
    pub scale: Scale,
}

impl SuiteConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            mutation: None,
            scale: Scale::FULL,
        }
    }

    fn mutations(&self) -> Mutations {
        self.mutation.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub invariant: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SuiteReport {
    pub mutation: Option<String>,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> BTreeSet<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.invariant.clone())
            .collect()
    }

    pub fn get(&self, invariant: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.invariant == invariant)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "suite mutation={}\n",
            self.mutation.as_deref().unwrap_or("none")
        );
        let width = self
            .checks
            .iter()
            .map(|c| c.invariant.len())
            .max()
            .unwrap_or(0);
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<width$}  {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.invariant,
                c.detail
            ));
        }
        out
    }
}

/// Invariants a mutation is expected to break.
pub fn expected_failures(mutation: Option<Mutation>) -> BTreeSet<&'static str> {
    let names: &[&'static str] = match mutation {
        None => &[],
        Some(Mutation::Site(_)) => &["MAINTENANCE-SUFFICIENCY"],
        Some(Mutation::Flag(Flag::SkipWipe)) => &["TEMPORAL-ISOLATION"],
        Some(Mutation::Flag(Flag::SkipRevoke)) => &["REVOKE-COMPLETENESS"],
        Some(Mutation::Flag(Flag::SkipVerify)) => &["IAGO-GATE"],
        Some(Mutation::Flag(Flag::SkipRedirect)) => &["POINTER-CONFINEMENT"],
        // Unsealed stores are both a leak and undetectable tampering.
        Some(Mutation::Flag(Flag::SkipSeal)) => &["SHIELDED-IO", "ADVERSARY-TAXONOMY"],
    };
    names.iter().copied().collect()
}

/// Matrix rows, in report order.
pub const INVARIANTS: [&str; 18] = [
    "OWNERSHIP-EXCLUSIVITY",
    "CLONE-EQUIVALENCE",
    "REVOKE-COMPLETENESS",
    "TEMPORAL-ISOLATION",
    "IAGO-GATE",
    "POINTER-CONFINEMENT",
    "SHIELDED-IO",
    "MAINTENANCE-SUFFICIENCY",
    "MAINTENANCE-NECESSITY",
    "SWITCH-COUNT",
    "TRAP-TOTALITY",
    "HOST-CONFINEMENT",
    "STATE-MACHINE-SOUNDNESS",
    "METRIC-CONSISTENCY",
    "CONTEXT-ROUNDTRIP",
    "FLAT-SCALING",
    "ADVERSARY-TAXONOMY",
    "DETERMINISM",
];

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03)
}

// ---------------------------------------------------------------------------
// Ownership

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OwnershipFuzz {
    pub ops: usize,
    pub realms_created: usize,
    pub realms_destroyed: usize,
    /// Granules owned by a realm at sweep time.
    pub realm_owned: usize,
    /// Of those, how many refused a host read, write and exec.
    pub host_faulted: usize,
    /// Host probes made during the run that disagreed with ownership.
    pub probe_mismatches: usize,
    /// Cross-realm accesses that were allowed without sharing.
    pub exclusivity_breaches: usize,
    /// Leaves that reference a granule the tree's realm cannot access.
    pub foreign_mappings: usize,
}

impl OwnershipFuzz {
    pub fn passed(&self) -> bool {
        self.host_faulted == self.realm_owned
            && self.probe_mismatches == 0
            && self.exclusivity_breaches == 0
            && self.foreign_mappings == 0
    }
}

struct FuzzRealm {
    world: WorldId,
    tree: RttTree,
    nodes: NodePool,
    data: Vec<GranuleId>,
    mapped: BTreeMap<u64, GranuleId>,
}

const FUZZ_POOL: usize = 512;
const FUZZ_REALMS: usize = 8;
const FUZZ_NODES: usize = 4;
const FUZZ_IPA_PAGES: u64 = (4 << 20) / GRANULE_SIZE as u64;

fn host_refused(gs: &GranuleSpace, g: GranuleId) -> bool {
    [AccessKind::Read, AccessKind::Write, AccessKind::Exec]
        .into_iter()
        .all(|k| gs.permits(WorldId::NormalWorld, g, k) == AccessOutcome::GptFault)
}

/// Random delegate, map, unmap, undelegate and destroy operations against
/// the protection table and translation trees, followed by an exhaustive
/// host sweep.
pub fn ownership_fuzz(seed: u64, ops: usize) -> OwnershipFuzz {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gs = GranuleSpace::new(FUZZ_POOL);
    let mut trace = Trace::new();
    let mut slots: Vec<Option<FuzzRealm>> = (0..FUZZ_REALMS).map(|_| None).collect();
    let mut out = OwnershipFuzz {
        ops,
        ..Default::default()
    };
    let mut next_id = 1u32;

    for _ in 0..ops {
        let free: Vec<GranuleId> = gs
            .iter()
            .filter(|g| g.owner == WorldId::NormalWorld)
            .map(|g| g.id)
            .collect();
        let live: Vec<usize> = (0..FUZZ_REALMS).filter(|&i| slots[i].is_some()).collect();
        match rng.gen_range(0..100) {
            // Create a realm with its own node pool.
            0..=7 => {
                let Some(slot) = slots.iter().position(Option::is_none) else {
                    continue;
                };
                if free.len() < FUZZ_NODES {
                    continue;
                }
                let world = WorldId::ContainerRealm(RealmId(next_id));
                next_id += 1;
                let picked: Vec<GranuleId> = free
                    .choose_multiple(&mut rng, FUZZ_NODES)
                    .copied()
                    .collect();
                for &g in &picked {
                    gs.delegate(g, world, &mut trace)
                        .expect("free granule delegates");
                }
                let mut nodes: NodePool = picked.into_iter().collect();
                let tree = RttTree::new(world, 3, &mut gs, &mut nodes).expect("root node");
                slots[slot] = Some(FuzzRealm {
                    world,
                    tree,
                    nodes,
                    data: Vec::new(),
                    mapped: BTreeMap::new(),
                });
                out.realms_created += 1;
            }
            // Delegate a data granule, sometimes to the wrong target or twice.
            8..=37 => {
                let Some(&i) = live.choose(&mut rng) else {
                    continue;
                };
                let r = slots[i].as_mut().expect("live");
                let g = if rng.gen_bool(0.1) || free.is_empty() {
                    GranuleId(rng.gen_range(0..FUZZ_POOL as u32))
                } else {
                    *free.choose(&mut rng).expect("free")
                };
                if gs.delegate(g, r.world, &mut trace).is_ok() {
                    r.data.push(g);
                }
                if rng.gen_bool(0.05) {
                    let _ = gs.delegate(g, WorldId::NormalWorld, &mut trace);
                }
            }
            // Map, possibly a granule that belongs to someone else.
            38..=67 => {
                let Some(&i) = live.choose(&mut rng) else {
                    continue;
                };
                let r = slots[i].as_mut().expect("live");
                let g = if rng.gen_bool(0.85) && !r.data.is_empty() {
                    *r.data.choose(&mut rng).expect("data")
                } else {
                    GranuleId(rng.gen_range(0..FUZZ_POOL as u32))
                };
                let ipa = rng.gen_range(0..FUZZ_IPA_PAGES) * GRANULE_SIZE as u64;
                let perms = *[Perms::R, Perms::RW, Perms::RWX]
                    .choose(&mut rng)
                    .expect("perms");
                if r.tree
                    .map(&mut gs, &mut r.nodes, Ipa(ipa), g, perms)
                    .is_ok()
                {
                    r.mapped.insert(ipa, g);
                }
            }
            // Unmap.
            68..=79 => {
                let Some(&i) = live.choose(&mut rng) else {
                    continue;
                };
                let r = slots[i].as_mut().expect("live");
                let keys: Vec<u64> = r.mapped.keys().copied().collect();
                let Some(&ipa) = keys.choose(&mut rng) else {
                    continue;
                };
                r.tree.unmap(&mut gs, Ipa(ipa)).expect("unmap");
                r.mapped.remove(&ipa);
            }
            // Undelegate; refused while mapped.
            80..=89 => {
                let Some(&i) = live.choose(&mut rng) else {
                    continue;
                };
                let r = slots[i].as_mut().expect("live");
                if r.data.is_empty() {
                    continue;
                }
                let k = rng.gen_range(0..r.data.len());
                let g = r.data[k];
                let mapped = r.mapped.values().any(|&m| m == g);
                match gs.undelegate(g, &mut trace) {
                    Ok(()) => {
                        assert!(!mapped, "undelegate succeeded on a mapped granule");
                        r.data.swap_remove(k);
                    }
                    Err(_) => assert!(mapped, "undelegate refused an unmapped granule"),
                }
            }
            // Destroy a realm.
            90..=94 => {
                let Some(&i) = live.choose(&mut rng) else {
                    continue;
                };
                let mut r = slots[i].take().expect("live");
                for &ipa in r.mapped.keys() {
                    r.tree.unmap(&mut gs, Ipa(ipa)).expect("unmap");
                }
                let nodes = r.tree.teardown(&mut gs).expect("teardown");
                for g in nodes.into_iter().chain(r.nodes).chain(r.data) {
                    gs.undelegate(g, &mut trace)
                        .expect("released granule undelegates");
                }
                out.realms_destroyed += 1;
            }
            // Host probe.
            _ => {
                let g = GranuleId(rng.gen_range(0..FUZZ_POOL as u32));
                let owned = gs.get(g).expect("granule").owner.is_realm();
                if host_refused(&gs, g) != owned {
                    out.probe_mismatches += 1;
                }
                // Keep the trace bounded: the sweep below covers every granule.
                if gs.read(WorldId::NormalWorld, g, 0, 16, &mut trace).is_ok() == owned {
                    out.probe_mismatches += 1;
                }
            }
        }
    }

    let realms: Vec<WorldId> = slots.iter().flatten().map(|r| r.world).collect();
    for gr in gs.iter() {
        if gr.owner.is_realm() {
            out.realm_owned += 1;
            if host_refused(&gs, gr.id) {
                out.host_faulted += 1;
            }
            for &other in &realms {
                if other != gr.owner
                    && !gr.shared_with.contains(&other)
                    && gs.permits(other, gr.id, AccessKind::Read) == AccessOutcome::Allowed
                {
                    out.exclusivity_breaches += 1;
                }
            }
        }
    }
    for r in slots.iter().flatten() {
        for (ipa, g, _) in r.tree.mappings() {
            if gs.permits(r.world, g, AccessKind::Read) != AccessOutcome::Allowed
                || r.mapped.get(&ipa.0) != Some(&g)
            {
                out.foreign_mappings += 1;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Clone and revoke

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CloneRevoke {
    pub shapes: usize,
    pub mapped: usize,
    pub clone_mismatches: usize,
    /// Source-tree leaves outside the cloned range that leaked into the clone.
    pub clone_overreach: usize,
    /// Mapped pages for which the source tree now faults `Empty`.
    pub source_empty: usize,
    /// Mapped pages the container tree translates.
    pub container_translated: usize,
}

impl CloneRevoke {
    pub fn clone_ok(&self) -> bool {
        self.clone_mismatches == 0 && self.clone_overreach == 0
    }

    pub fn revoke_ok(&self) -> bool {
        self.source_empty == self.mapped && self.container_translated == self.mapped
    }
}

/// Random tree shapes: the System Realm maps a window, clones it for a
/// container, revokes its own view and hands the granules over.
pub fn clone_revoke_trials(seed: u64, shapes: usize, revoke: bool) -> CloneRevoke {
    let mut out = CloneRevoke {
        shapes,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 0..shapes {
        let levels = [2u8, 3, 4][n % 3];
        let pages: u64 = rng.gen_range(1..=700);
        let density: f64 = rng.gen_range(0.3..=1.0);
        let span = RttTree::entry_span(levels, 0);
        let base = rng.gen_range(1..4) * span + rng.gen_range(0..8) * GRANULE_SIZE as u64;
        let end = base + pages * GRANULE_SIZE as u64;

        let mut trace = Trace::new();
        let mut gs = GranuleSpace::new(pages as usize + 96);
        let sys = WorldId::SystemRealm;
        let container = WorldId::ContainerRealm(RealmId(1));
        let mut next = 0u32;
        let mut take = |gs: &mut GranuleSpace, to: WorldId, trace: &mut Trace| {
            let g = GranuleId(next);
            next += 1;
            gs.delegate(g, to, trace).expect("fresh granule");
            g
        };
        let mut sys_nodes: NodePool = (0..40).map(|_| take(&mut gs, sys, &mut trace)).collect();
        let mut c_nodes: NodePool = (0..40)
            .map(|_| take(&mut gs, container, &mut trace))
            .collect();
        let mut src = RttTree::new(sys, levels, &mut gs, &mut sys_nodes).expect("root");

        // A System Realm page just outside the window must not be cloned.
        let outside = base - GRANULE_SIZE as u64;
        let g = take(&mut gs, sys, &mut trace);
        src.map(&mut gs, &mut sys_nodes, Ipa(outside), g, Perms::RW)
            .expect("map outside");

        let mut window = Vec::new();
        for p in 0..pages {
            if !rng.gen_bool(density) {
                continue;
            }
            let ipa = Ipa(base + p * GRANULE_SIZE as u64);
            let g = take(&mut gs, sys, &mut trace);
            let perms = *[Perms::R, Perms::RW, Perms::RWX]
                .choose(&mut rng)
                .expect("perms");
            src.map(&mut gs, &mut sys_nodes, ipa, g, perms)
                .expect("map window");
            window.push((ipa, g));
        }
        out.mapped += window.len();

        let clone = src
            .clone_range(&mut gs, &mut c_nodes, container, base, end)
            .expect("clone");
        for &(ipa, _) in &window {
            if clone.leaf(ipa) != src.leaf(ipa) {
                out.clone_mismatches += 1;
            }
        }
        if matches!(clone.leaf(Ipa(outside)), Some(RttEntry::Assigned { .. })) {
            out.clone_overreach += 1;
        }

        if revoke {
            src.revoke_range(&mut gs, Ipa(base), Ipa(end))
                .expect("revoke");
        }
        for &(_, g) in &window {
            gs.transfer(g, container, &mut trace).expect("transfer");
        }
        for &(ipa, _) in &window {
            if src.resolve(&gs, ipa, AccessKind::Read) == Walk::Fault(Stage2Fault::Empty) {
                out.source_empty += 1;
            }
            if clone.resolve(&gs, ipa, AccessKind::Read).is_translated() {
                out.container_translated += 1;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Temporal isolation

/// 128-bit marker written by the temporal test.
pub const SENTINEL: [u8; 16] = *b"\xc0\xff\xee\x5e\xa1\xed\x0f\xf1\xce\xde\xad\xbe\xef\x12\x34\x56";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TemporalSweep {
    pub containers: usize,
    /// Containers that read their own sentinel back before teardown.
    pub confirmed: usize,
    pub readable: usize,
    pub hits: usize,
    pub findings: usize,
}

impl TemporalSweep {
    pub fn passed(&self) -> bool {
        self.confirmed == self.containers && self.hits == 0 && self.findings == 0
    }
}

fn sentinel_program() -> Vec<crate::cpu::Instr> {
    let mut b = ProgramBuilder::new();
    for p in 0..layout::GRANULES as u64 {
        b = b.store(p * GRANULE_SIZE as u64 + 2048, &SENTINEL);
    }
    b.load(layout::HEAP + 2048, SENTINEL.len() as u64)
        .exit(0)
        .build()
}

/// One to four containers that fill every page with [`SENTINEL`], run to
/// completion and removed.
pub fn temporal_execution(
    seed: u64,
    mutations: &Mutations,
) -> Result<super::Execution, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4);
    let containers = (0..n)
        .map(|i| scenario::container(&format!("filler{i}"), sentinel_program()))
        .collect();
    let sc = scenario::base("temporal", containers);
    execute(&sc, seed, mutations, Vec::new())
}

/// Containers fill every page with the sentinel and are destroyed; the host
/// then reads every granule in the pool.
pub fn temporal_sweep(seed: u64, mutations: &Mutations) -> Result<TemporalSweep, HarnessError> {
    let mut exec = temporal_execution(seed, mutations)?;
    let n = exec.containers.len();
    let confirmed = exec
        .containers
        .iter()
        .filter(|c| {
            c.exit == Some(0)
                && c.observations.iter().any(|o| {
                    matches!(o, crate::rmm::Observation::Load { data, .. } if data[..] == SENTINEL)
                })
        })
        .count();
    let findings = audit::released_memory_is_clean(&exec.world).len();
    let (readable, hits) = audit::sentinel_sweep(&mut exec.world, &SENTINEL);
    Ok(TemporalSweep {
        containers: n,
        confirmed,
        readable,
        hits,
        findings,
    })
}

// ---------------------------------------------------------------------------
// Iago gate

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IagoFuzz {
    pub replies: usize,
    pub delivered: usize,
    pub rejected: usize,
    /// Delivered replies the independent bounds check disagrees with.
    pub violations: usize,
}

impl IagoFuzz {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.delivered > 0 && self.rejected > 0
    }
}

/// Bytes the pending read asks for.
pub const IAGO_REQUEST: u64 = 256;

/// A world whose single container is stopped at a forwarded private-pointer
/// read of [`IAGO_REQUEST`] bytes into `layout::HEAP`.
pub fn pending_read_world(
    seed: u64,
    mutations: &Mutations,
) -> Result<(World, RealmId), HarnessError> {
    let program = ProgramBuilder::new()
        .share_data(layout::BUFFER, layout::BUFFER_SIZE)
        .read(Arg::Imm(3), layout::HEAP, IAGO_REQUEST)
        .load(layout::HEAP, IAGO_REQUEST)
        .exit(0)
        .build();
    let mut config = WorldConfig::new(128);
    config.mutations = mutations.clone();
    let mut world = World::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    world.rsi_create_system_realm(SystemRealmConfig::default())?;
    let (image, hash) = image_for(&world, &program, &mut rng);
    let r = world.handle_create_request(&CreateRequest {
        image,
        granules: layout::GRANULES,
        entry: 0,
        stack_size: GRANULE_SIZE as u64,
        policy: crate::system_realm::Policy {
            sha256: Some(hash),
            max_shared_buffer: layout::BUFFER_SIZE,
        },
        shielded_console: false,
    })?;
    match world.enter_container(r)? {
        ExitReason::Trap(_) => {}
        ExitReason::Exited(code) => {
            return Err(HarnessError::Validation(format!(
                "iago workload exited early with {code}"
            )))
        }
    }
    let fwd = world.handle_trap(r)?;
    if fwd.sysno() != Some(Sysno::Read) {
        return Err(HarnessError::Validation(
            "iago workload did not stop at read".into(),
        ));
    }
    Ok((world, r))
}

fn adversarial_reply(rng: &mut ChaCha8Rng, buf: u64) -> SyscallReply {
    let cap = layout::BUFFER_SIZE;
    let out_len = match rng.gen_range(0..8) {
        0 => 0,
        1 => rng.gen_range(1..=IAGO_REQUEST),
        2 => IAGO_REQUEST,
        3 => IAGO_REQUEST + 1,
        4 => cap,
        5 => cap + rng.gen_range(1..=4096),
        6 => rng.gen_range(0..=2 * cap),
        _ => u64::MAX - rng.gen_range(0..16),
    };
    let out_ptr = match rng.gen_range(0..7) {
        0 => None,
        1..=3 => Some(Ipa(buf)),
        4 => Some(Ipa(buf + rng.gen_range(1..=cap))),
        5 => Some(Ipa(buf.wrapping_sub(rng.gen_range(1..=0x8000)))),
        _ => Some(Ipa(rng.gen())),
    };
    let retval = match rng.gen_range(0..6) {
        0 | 1 => out_len as i64,
        2 => out_len as i64 + rng.gen_range(-2..=2),
        3 => -rng.gen_range(1..=200),
        4 => -rng.gen_range(4000..=5000),
        _ => rng.gen(),
    };
    let errno = match rng.gen_range(0..4) {
        0 | 1 => {
            if retval < 0 {
                -retval
            } else {
                0
            }
        }
        2 => 0,
        _ => rng.gen_range(-10..200),
    };
    SyscallReply {
        retval,
        out_len,
        out_ptr,
        errno,
    }
}

/// The bounds a delivered read reply must respect, derived from the
/// request alone.
fn reply_within_bounds(reply: &SyscallReply, buf: u64) -> bool {
    let cap = layout::BUFFER_SIZE;
    if reply.out_len > IAGO_REQUEST.min(cap) {
        return false;
    }
    if reply.retval < 0 {
        return reply.out_len == 0 && reply.retval >= -4095 && reply.errno == -reply.retval;
    }
    reply.errno == 0
        && reply.retval as u64 == reply.out_len
        && (reply.out_len == 0 || reply.out_ptr == Some(Ipa(buf)))
}

fn private_image(world: &World, r: RealmId) -> Vec<Vec<u8>> {
    let d = world.descriptor(r).expect("realm");
    d.private
        .iter()
        .map(|&g| {
            world
                .granules()
                .get(g)
                .expect("granule")
                .contents()
                .to_vec()
        })
        .collect()
}

/// Offsets in private memory that changed, as window offsets.
fn changed_offsets(before: &[Vec<u8>], after: &[Vec<u8>]) -> Vec<u64> {
    let mut out = Vec::new();
    for (p, (a, b)) in before.iter().zip(after).enumerate() {
        if a != b {
            out.extend(
                a.iter()
                    .zip(b)
                    .enumerate()
                    .filter(|(_, (x, y))| x != y)
                    .map(|(i, _)| (p * GRANULE_SIZE + i) as u64),
            );
        }
    }
    out
}

/// Random host replies to a pending private-pointer read, delivered through
/// the monitor's gate, each checked against an independent bounds oracle
/// and against the memory the container can see.
pub fn iago_fuzz(
    seed: u64,
    replies: usize,
    mutations: &Mutations,
) -> Result<IagoFuzz, HarnessError> {
    let (base, r) = pending_read_world(seed, mutations)?;
    let window = base.descriptor(r).expect("realm").window_base().0;
    let buf = window + layout::BUFFER;
    let before = private_image(&base, r);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let mut out = IagoFuzz {
        replies,
        ..Default::default()
    };
    for _ in 0..replies {
        let reply = adversarial_reply(&mut rng, buf);
        let mut w = base.clone();
        match w.reenter_container(r, reply) {
            Ok(()) => {
                out.delivered += 1;
                let mut ok = reply_within_bounds(&reply, buf);
                let n = reply.out_len;
                let writable = |off: u64| {
                    (layout::HEAP..layout::HEAP + n.min(IAGO_REQUEST)).contains(&off)
                        || (layout::BUFFER..layout::BUFFER + layout::BUFFER_SIZE).contains(&off)
                };
                ok &= changed_offsets(&before, &private_image(&w, r))
                    .into_iter()
                    .all(writable);
                if !ok {
                    out.violations += 1;
                }
            }
            Err(_) => out.rejected += 1,
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shielded I/O

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ShieldedScan {
    pub scenarios: usize,
    pub plaintext_bytes: usize,
    pub host_bytes: usize,
    pub leaks: Vec<String>,
}

/// Runs the corpus and scans every host-held store for shielded plaintext.
pub fn shielded_scan(seed: u64, mutations: &Mutations) -> Result<ShieldedScan, HarnessError> {
    let mut out = ShieldedScan::default();
    for sc in scenario::corpus() {
        let exec = execute(&sc, sub_seed(seed, 2), mutations, Vec::new())?;
        out.scenarios += 1;
        if let Some(sys) = exec.world.system() {
            out.plaintext_bytes += sys
                .shielded_plaintext()
                .iter()
                .map(|p| p.len())
                .sum::<usize>();
        }
        out.host_bytes += exec
            .world
            .host()
            .host_stores()
            .iter()
            .map(|s| s.len())
            .sum::<usize>();
        out.leaks.extend(
            audit::plaintext_leaks(&exec.world)
                .into_iter()
                .map(|l| format!("{}: {l}", sc.name)),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum TamperKind {
    Flip,
    Truncate,
    Reorder,
    Replay,
    Splice,
}

impl TamperKind {
    pub const ALL: [TamperKind; 5] = [
        TamperKind::Flip,
        TamperKind::Truncate,
        TamperKind::Reorder,
        TamperKind::Replay,
        TamperKind::Splice,
    ];
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TamperCatalog {
    pub cases: usize,
    /// Tampering that actually changed a store.
    pub applied: usize,
    pub detected: usize,
    pub per_kind: BTreeMap<String, (usize, usize)>,
}

impl TamperCatalog {
    /// Every case changed a store and every change was flagged.
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.applied == self.cases && self.detected == self.cases
    }

    /// No change went unflagged; vacuous when nothing could be applied.
    pub fn sound(&self) -> bool {
        self.detected >= self.applied
    }
}

/// Every tamper kind, `seeds` times each, against the shielded files left
/// behind by an honest run.
pub fn tamper_catalog(
    seed: u64,
    seeds: u64,
    mutations: &Mutations,
) -> Result<TamperCatalog, HarnessError> {
    let sc = scenario::shielded_pair();
    let honest = execute(&sc, sc.seed, mutations, Vec::new())?;
    let files = ["/secure/alpha", "/secure/beta"];
    let mut out = TamperCatalog::default();
    for kind in TamperKind::ALL {
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 100 + s) ^ kind as u64);
            let mut w = honest.world.clone();
            let file = *files.choose(&mut rng).expect("files");
            let len = w.host().file(file).map_or(0, <[u8]>::len) as u64;
            let target = StoreTarget::File(file.to_string());
            let action = match kind {
                TamperKind::Flip => AdversaryAction::FlipStoreBit {
                    target,
                    bit: rng.gen_range(0..len.max(1) * 8),
                },
                TamperKind::Truncate => AdversaryAction::TruncateStore {
                    target,
                    keep: rng.gen_range(0..len.max(1)),
                },
                TamperKind::Reorder => AdversaryAction::ReorderBlocks { target },
                // Block 0 of each file is rewritten by the workload, so an
                // older record exists to replay.
                TamperKind::Replay => AdversaryAction::ReplayBlock { target, index: 0 },
                TamperKind::Splice => AdversaryAction::SpliceBlock {
                    from: files
                        .iter()
                        .find(|f| **f != file)
                        .expect("other")
                        .to_string(),
                    into: file.to_string(),
                    index: rng.gen_range(0..2),
                },
            };
            let before = w.system().map_or(0, |s| s.detections().len());
            let effect = w.host.tamper_store(&action);
            let flagged = w.verify_shielded_stores() > 0
                && w.system().map_or(0, |s| s.detections().len()) > before;
            out.cases += 1;
            let slot = out
                .per_kind
                .entry(format!("{kind:?}").to_lowercase())
                .or_default();
            if effect == Effect::Applied {
                out.applied += 1;
                slot.0 += 1;
            }
            if flagged {
                out.detected += 1;
                slot.1 += 1;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Coherence

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CoherenceMatrix {
    /// Violations over the corpus with every site enabled.
    pub baseline: usize,
    /// Violations over the corpus with one site disabled.
    pub per_site: BTreeMap<String, usize>,
}

impl CoherenceMatrix {
    pub fn necessary(&self) -> bool {
        self.per_site.len() == MaintenanceSite::ALL.len() && self.per_site.values().all(|&v| v > 0)
    }
}

fn corpus_violations(seed: u64, mutations: &Mutations) -> Result<usize, HarnessError> {
    let mut total = 0;
    for sc in scenario::corpus() {
        total += execute(&sc, seed, mutations, Vec::new())?
            .world
            .ledger()
            .violations()
            .len();
    }
    Ok(total)
}

pub fn coherence_matrix(seed: u64, mutations: &Mutations) -> Result<CoherenceMatrix, HarnessError> {
    let mut out = CoherenceMatrix {
        baseline: corpus_violations(seed, mutations)?,
        ..Default::default()
    };
    for site in MaintenanceSite::ALL {
        let m: Mutations = mutations.iter().chain([Mutation::Site(site)]).collect();
        out.per_site
            .insert(site.name().to_string(), corpus_violations(seed, &m)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Switch count

/// (syscalls, switches counted by the world, switch events in the trace)
pub fn switch_counts(
    seed: u64,
    ks: &[usize],
    mutations: &Mutations,
) -> Result<Vec<(usize, u64, u64)>, HarnessError> {
    ks.iter()
        .map(|&k| {
            let exec = execute(&scenario::getpid_loop(k), seed, mutations, Vec::new())?;
            let counted = Metrics::collect(&exec)
                .containers
                .iter()
                .map(|c| c.switches)
                .sum();
            let events = exec
                .world
                .trace()
                .records()
                .iter()
                .filter(|r| matches!(r.event, Event::Switch { .. }))
                .count() as u64;
            Ok((k, counted, events))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lifecycle scaling

pub const SCALING_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Scaling {
    /// Per-operation step counts of the first container at each size.
    pub per_size: BTreeMap<usize, BTreeMap<String, u64>>,
    /// Largest coefficient of variation of any operation across every
    /// container at every size.
    pub max_cv: f64,
    pub roundtrip: bool,
    pub reclaimed: bool,
    pub findings: Vec<Finding>,
}

impl Scaling {
    pub fn flat(&self) -> bool {
        self.max_cv == 0.0 && self.reclaimed
    }
}

fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub fn lifecycle_scaling(seed: u64, mutations: &Mutations) -> Result<Scaling, HarnessError> {
    let mut out = Scaling {
        roundtrip: true,
        reclaimed: true,
        ..Default::default()
    };
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for n in SCALING_COUNTS {
        let rep = run_lifecycle(n, seed, mutations)?;
        out.roundtrip &= rep.context_roundtrip;
        out.reclaimed &= rep.pool_reclaimed;
        out.findings.extend(rep.findings.iter().cloned());
        for ops in &rep.per_container {
            for (op, &steps) in ops {
                samples.entry(op.clone()).or_default().push(steps as f64);
            }
        }
        out.per_size
            .insert(n, rep.per_container.first().cloned().unwrap_or_default());
    }
    out.max_cv = samples
        .values()
        .map(|v| coefficient_of_variation(v))
        .fold(0.0, f64::max);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Adversary differential

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AdversaryDifferential {
    pub scripts: u64,
    pub actions: usize,
    pub outcomes: BTreeMap<String, usize>,
    pub forbidden: Vec<String>,
}

impl AdversaryDifferential {
    pub fn passed(&self) -> bool {
        self.forbidden.is_empty()
    }
}

/// Seeded attack scripts against the shielded workload, each classified
/// against one honest baseline.
pub fn adversary_differential(
    seed: u64,
    scripts: u64,
    mutations: &Mutations,
) -> Result<AdversaryDifferential, HarnessError> {
    let sc = scenario::shielded_pair();
    let honest = execute(&sc, sc.seed, mutations, Vec::new())?;
    let realms: Vec<u32> = honest
        .containers
        .iter()
        .filter_map(|c| c.realm)
        .map(|r| r.0)
        .collect();
    let files = ["/secure/alpha", "/secure/beta"];
    let targets = scenario::shielded_targets();
    let mut out = AdversaryDifferential {
        scripts,
        ..Default::default()
    };
    for k in [
        ActionOutcome::Faulted,
        ActionOutcome::Detected,
        ActionOutcome::Absorbed,
        ActionOutcome::SilentCorruption,
        ActionOutcome::PlaintextLeak,
    ] {
        out.outcomes.insert(k.to_string(), 0);
    }
    for i in 0..scripts {
        let script = adversary::random_script(
            sub_seed(seed, 1000 + i),
            honest.turns,
            sc.pool_size,
            &realms,
            &files,
            &targets,
        );
        let exec = execute(&sc, sc.seed, mutations, script.clone())?;
        let report = adversary::classify(&exec, Some(&honest), &script);
        for a in &report.actions {
            out.actions += 1;
            *out.outcomes.entry(a.outcome.to_string()).or_default() += 1;
            if a.outcome.forbidden() {
                out.forbidden.push(format!(
                    "script {i} #{} {} -> {}",
                    a.index, a.action, a.outcome
                ));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Determinism

/// Scenarios whose trace differed between two identical runs.
pub fn determinism(seed: u64, mutations: &Mutations) -> Result<Vec<String>, HarnessError> {
    let mut out = Vec::new();
    for sc in scenario::corpus() {
        let a = execute(&sc, seed, mutations, sc.adversary.clone())?;
        let b = execute(&sc, seed, mutations, sc.adversary.clone())?;
        if a.world.trace().render() != b.world.trace().render() {
            out.push(sc.name.clone());
        }
    }
    Ok(out)
}

/// Audit findings over the corpus, keyed by invariant.
pub fn corpus_findings(seed: u64, mutations: &Mutations) -> Result<Vec<Finding>, HarnessError> {
    let mut out = Vec::new();
    for sc in scenario::corpus() {
        let exec = execute(&sc, seed, mutations, sc.adversary.clone())?;
        let metrics = Metrics::collect(&exec);
        out.extend(audit::audit(&exec, &metrics).into_iter().map(|f| Finding {
            detail: format!("{}: {}", sc.name, f.detail),
            ..f
        }));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// The matrix

struct Matrix {
    rows: BTreeMap<String, (bool, Vec<String>)>,
}

impl Matrix {
    fn new() -> Self {
        Self {
            rows: INVARIANTS
                .iter()
                .map(|n| (n.to_string(), (true, Vec::new())))
                .collect(),
        }
    }

    fn check(&mut self, invariant: &str, passed: bool, detail: impl Into<String>) {
        let row = self
            .rows
            .entry(invariant.to_string())
            .or_insert((true, Vec::new()));
        row.0 &= passed;
        row.1.push(detail.into());
    }

    fn finish(self, mutation: Option<Mutation>) -> SuiteReport {
        let mut rows = self.rows;
        let mut checks = Vec::new();
        let mut push = |name: &str, (passed, details): (bool, Vec<String>)| {
            checks.push(CheckResult {
                invariant: name.to_string(),
                passed,
                detail: details.join("; "),
            });
        };
        for name in INVARIANTS {
            if let Some(row) = rows.remove(name) {
                push(name, row);
            }
        }
        for (name, row) in rows {
            push(&name, row);
        }
        SuiteReport {
            mutation: mutation.map(|m| m.name().to_string()),
            checks,
        }
    }
}

/// Every property check, folded into one matrix.
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport, HarnessError> {
    let seed = config.seed;
    let scale = config.scale;
    let muts = config.mutations();
    let mut m = Matrix::new();

    let own = ownership_fuzz(sub_seed(seed, 10), scale.ownership_ops);
    m.check(
        "OWNERSHIP-EXCLUSIVITY",
        own.passed(),
        format!(
            "{} ops, host refused {}/{} realm granules, {} probe mismatches, {} cross-realm breaches",
            own.ops, own.host_faulted, own.realm_owned, own.probe_mismatches, own.exclusivity_breaches
        ),
    );

    let cr = clone_revoke_trials(
        sub_seed(seed, 11),
        scale.rtt_shapes,
        !muts.has(Flag::SkipRevoke),
    );
    m.check(
        "CLONE-EQUIVALENCE",
        cr.clone_ok(),
        format!(
            "{} shapes, {} mapped pages, {} mismatches",
            cr.shapes, cr.mapped, cr.clone_mismatches
        ),
    );
    m.check(
        "REVOKE-COMPLETENESS",
        cr.revoke_ok(),
        format!(
            "system view empty {}/{}, container translates {}/{}",
            cr.source_empty, cr.mapped, cr.container_translated, cr.mapped
        ),
    );

    let t = temporal_sweep(sub_seed(seed, 12), &muts)?;
    m.check(
        "TEMPORAL-ISOLATION",
        t.passed(),
        format!(
            "{} containers, sentinel found in {} of {} host-readable granules",
            t.containers, t.hits, t.readable
        ),
    );

    let iago = iago_fuzz(sub_seed(seed, 13), scale.iago_replies, &muts)?;
    m.check(
        "IAGO-GATE",
        iago.passed(),
        format!(
            "{} replies, {} delivered, {} rejected, {} out of bounds",
            iago.replies, iago.delivered, iago.rejected, iago.violations
        ),
    );

    let scan = shielded_scan(seed, &muts)?;
    // A workload that never reaches the shielded paths cannot leak through
    // them; the detail says so instead of failing the row.
    let exercised = if scan.plaintext_bytes == 0 {
        " (not exercised)"
    } else {
        ""
    };
    m.check(
        "SHIELDED-IO",
        scan.leaks.is_empty(),
        format!(
            "{} plaintext bytes, {} host bytes scanned, {} leaks{exercised}",
            scan.plaintext_bytes,
            scan.host_bytes,
            scan.leaks.len()
        ),
    );
    let cat = tamper_catalog(seed, scale.tamper_seeds, &muts)?;
    m.check(
        "SHIELDED-IO",
        cat.sound(),
        format!(
            "tamper catalog detected {}/{} (applied {})",
            cat.detected, cat.cases, cat.applied
        ),
    );

    let coh = coherence_matrix(seed, &muts)?;
    // Necessity is a property of the maintenance plan itself, so it is
    // measured with every protection in place.
    let need = if muts.iter().any(|m| matches!(m, Mutation::Flag(_))) {
        coherence_matrix(seed, &Mutations::none())?
    } else {
        coh.clone()
    };
    let silent: Vec<&String> = need
        .per_site
        .iter()
        .filter(|(_, &v)| v == 0)
        .map(|(k, _)| k)
        .collect();
    m.check(
        "MAINTENANCE-SUFFICIENCY",
        coh.baseline == 0,
        format!("{} violations over the corpus", coh.baseline),
    );
    m.check(
        "MAINTENANCE-NECESSITY",
        need.necessary(),
        format!(
            "{} sites, unnoticed when disabled: {silent:?}",
            need.per_site.len()
        ),
    );

    let sw = switch_counts(seed, &[1, 10, 100], &muts)?;
    let sw_ok = sw.iter().all(|&(k, c, e)| c == 4 * k as u64 && e == c);
    m.check(
        "SWITCH-COUNT",
        sw_ok,
        sw.iter()
            .map(|(k, c, _)| format!("k={k}: {c}"))
            .collect::<Vec<_>>()
            .join(", "),
    );

    let sc = lifecycle_scaling(seed, &muts)?;
    m.check(
        "FLAT-SCALING",
        sc.flat(),
        format!("n={:?}, max cv {}", SCALING_COUNTS, sc.max_cv),
    );
    m.check(
        "CONTEXT-ROUNDTRIP",
        sc.roundtrip,
        "pause/unpause preserves every context",
    );
    let mut by_invariant: BTreeMap<&str, Vec<&Finding>> = BTreeMap::new();
    for f in &sc.findings {
        by_invariant
            .entry(f.invariant.as_str())
            .or_default()
            .push(f);
    }
    for (name, fs) in by_invariant {
        m.check(
            name,
            false,
            format!("{} lifecycle findings, first: {}", fs.len(), fs[0].detail),
        );
    }

    let adv = adversary_differential(seed, scale.adversary_scripts, &muts)?;
    m.check(
        "ADVERSARY-TAXONOMY",
        adv.passed(),
        format!(
            "{} scripts, {} actions, {}",
            adv.scripts,
            adv.actions,
            adv.outcomes
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    );

    let nondet = determinism(seed, &muts)?;
    m.check(
        "DETERMINISM",
        nondet.is_empty(),
        format!(
            "{} scenarios rerun, differing: {nondet:?}",
            scenario::corpus().len()
        ),
    );

    let findings = corpus_findings(seed, &muts)?;
    let mut by_name: BTreeMap<&str, Vec<&Finding>> = BTreeMap::new();
    for f in &findings {
        by_name.entry(f.invariant.as_str()).or_default().push(f);
    }
    for (name, fs) in by_name {
        m.check(
            name,
            false,
            format!("{} corpus findings, first: {}", fs.len(), fs[0].detail),
        );
    }
    Ok(m.finish(config.mutation))
}

/// Runs one scenario under the current build and returns whether its audits
/// pass; convenience for callers that only need a verdict.
pub fn scenario_is_clean(sc: &Scenario, seed: u64) -> Result<bool, HarnessError> {
    let exec = execute(sc, seed, &Mutations::none(), sc.adversary.clone())?;
    let metrics = Metrics::collect(&exec);
    Ok(audit::audit(&exec, &metrics).is_empty())
}
