// SPDX-License-Identifier: Apache-2.0

//! The trusted monitor and the world it manages.
//!
//! [`World`] owns every piece of simulated state: the granule pool, the
//! per-realm translation trees, the coherence ledger, the System Realm's
//! service state and the untrusted host. The monitor operations are split
//! over [`lifecycle`] (creation, image load, buffers, teardown) and [`exec`]
//! (entry, traps, forwarding, reentry).

pub mod exec;
pub mod lifecycle;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::coherence::{CoherenceLedger, MaintenanceSite};
use crate::cpu::{BufferKind, CpuContext, Instr};
use crate::granule::{GranuleError, GranuleId, GranuleSpace, RealmId, WorldId, GRANULE_SIZE};
use crate::host::TrimOs;
use crate::rtt::{Ipa, RttError, RttTree, Stage2Fault, Walk, DEFAULT_LEVELS};
use crate::shielded_io::Key;
use crate::system_realm::{RejectReason, SystemServices};
use crate::trace::{Domain, Event, Trace};

pub use exec::{
    DriveOutcome, ExitReason, ForwardedRequest, PendingTrap, SyndromeInfo, SyscallReply, TrapCause,
};
pub use lifecycle::{ContainerSpec, SystemRealmConfig};

pub const SYSTEM_REALM: RealmId = RealmId(0);
/// Pages of System Realm memory shared with the host for request payloads.
pub const BOUNCE_PAGES: usize = 8;
pub const BOUNCE_SIZE: u64 = (BOUNCE_PAGES * GRANULE_SIZE) as u64;
/// Size of the runtime parameter block at the top of container memory.
pub const PARAM_LEN: usize = 32;
pub const PARAM_MAGIC: &[u8; 4] = b"PRM0";

const TTBR0_TAG: u64 = 0x5454_0000_0000_0000;
const VBAR_TAG: u64 = 0x5642_0000_0000_0000;

/// Exit code of a container killed by the harness or an operator.
pub const EXIT_KILLED: i64 = 137;
/// Exit code of a container stopped because host misbehaviour was detected.
pub const EXIT_SECURITY_ABORT: i64 = 134;
/// Exit code of a container whose data abort was fatal.
pub const EXIT_FAULT: i64 = 139;
/// Exit code of a container whose requests the host stopped answering.
pub const EXIT_HOST_UNRESPONSIVE: i64 = 143;

pub fn world_of(realm: RealmId) -> WorldId {
    if realm == SYSTEM_REALM {
        WorldId::SystemRealm
    } else {
        WorldId::ContainerRealm(realm)
    }
}

pub fn domain_of(realm: RealmId) -> Domain {
    if realm == SYSTEM_REALM {
        Domain::SystemRealm
    } else {
        Domain::Container(realm)
    }
}

pub fn ttbr0_token(realm: RealmId) -> u64 {
    TTBR0_TAG | u64::from(realm.0)
}

pub fn vbar_token(realm: RealmId) -> u64 {
    VBAR_TAG | u64::from(realm.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RealmKind {
    System,
    Container,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RealmState {
    New,
    ImageLoaded,
    Runnable,
    Running,
    TrapPending,
    Destroyed,
}

impl RealmState {
    /// Edges of the lifecycle graph. Destruction is reachable from anywhere.
    pub fn may_become(self, next: RealmState) -> bool {
        use RealmState::*;
        matches!(
            (self, next),
            (New, ImageLoaded)
                | (ImageLoaded, Runnable)
                | (Runnable, Running)
                | (Running, TrapPending)
                | (TrapPending, Running)
        ) || (next == Destroyed && self != Destroyed)
    }
}

impl fmt::Display for RealmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RealmState::New => "new",
            RealmState::ImageLoaded => "image-loaded",
            RealmState::Runnable => "runnable",
            RealmState::Running => "running",
            RealmState::TrapPending => "trap-pending",
            RealmState::Destroyed => "destroyed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedBufferRecord {
    pub realm: RealmId,
    pub kind: BufferKind,
    pub va: Ipa,
    /// Physical location of the first byte.
    pub pa: (GranuleId, usize),
    pub size: u64,
    /// Backing granules in address order.
    pub granules: Vec<GranuleId>,
}

impl SharedBufferRecord {
    /// Whether `[ipa, ipa + len)` lies inside the buffer.
    pub fn contains(&self, ipa: Ipa, len: u64) -> bool {
        ipa.0 >= self.va.0
            && ipa
                .0
                .checked_add(len)
                .is_some_and(|end| end <= self.va.0 + self.size)
    }
}

/// Vector base and stage-1 root as a pair; what gets swapped on a switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisterSnapshot {
    pub vbar: u64,
    pub ttbr0: u64,
}

/// Something the container saw: used to compare runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Observation {
    Retval { call: &'static str, value: i64 },
    Load { offset: u64, data: Vec<u8> },
    Param(Vec<u8>),
}

#[derive(Debug, Clone)]
pub struct RealmDescriptor {
    pub id: RealmId,
    pub kind: RealmKind,
    pub state: RealmState,
    pub rtt: Option<RttTree>,
    pub ttbr0: u64,
    pub vbar: u64,
    pub entry_point: Ipa,
    pub stack_pointer: Ipa,
    pub protected_regions: Vec<(Ipa, u64)>,
    /// Present only while a trap is pending.
    pub saved_context: Option<CpuContext>,
    /// Present only while the realm has a live context on the CPU.
    pub live: Option<CpuContext>,
    pub measurement: Option<[u8; 32]>,
    /// Root-table index of the container's IPA window.
    pub slot: usize,
    /// Data granules in IPA order.
    pub private: Vec<GranuleId>,
    /// Granules backing this container's window in the System Realm tree.
    pub system_nodes: Vec<GranuleId>,
    pub buffers: Vec<SharedBufferRecord>,
    pub max_shared_buffer: u64,
    pub program: Vec<Instr>,
    pub image_len: usize,
    pub pending: Option<PendingTrap>,
    pub forwarded: Option<ForwardedRequest>,
    pub exited: Option<i64>,
    pub observations: Vec<Observation>,
    pub system_snapshot: Option<RegisterSnapshot>,
}

impl RealmDescriptor {
    pub fn window_base(&self) -> Ipa {
        self.protected_regions
            .first()
            .map(|r| r.0)
            .unwrap_or(Ipa(0))
    }

    pub fn memory_len(&self) -> u64 {
        (self.private.len() * GRANULE_SIZE) as u64
    }

    pub fn param_ipa(&self) -> Ipa {
        self.window_base()
            .add(self.memory_len() - GRANULE_SIZE as u64)
    }

    pub fn buffer(&self, kind: BufferKind) -> Option<&SharedBufferRecord> {
        self.buffers.iter().find(|b| b.kind == kind)
    }

    pub fn in_private(&self, ipa: Ipa, len: u64) -> bool {
        let base = self.window_base().0;
        ipa.0 >= base
            && ipa
                .0
                .checked_add(len)
                .is_some_and(|end| end <= base + self.memory_len())
    }

    pub fn is_live(&self) -> bool {
        self.state != RealmState::Destroyed && self.exited.is_none()
    }
}

/// Behaviour switches that deliberately break one protection, so the suite
/// can show that the checks notice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Flag {
    SkipWipe,
    SkipRevoke,
    SkipVerify,
    SkipRedirect,
    SkipSeal,
}

impl Flag {
    pub const ALL: [Flag; 5] = [
        Flag::SkipWipe,
        Flag::SkipRevoke,
        Flag::SkipVerify,
        Flag::SkipRedirect,
        Flag::SkipSeal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Flag::SkipWipe => "skip-wipe",
            Flag::SkipRevoke => "skip-revoke",
            Flag::SkipVerify => "skip-verify",
            Flag::SkipRedirect => "skip-redirect",
            Flag::SkipSeal => "skip-seal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mutation {
    Site(MaintenanceSite),
    Flag(Flag),
}

impl Mutation {
    pub fn all() -> Vec<Mutation> {
        MaintenanceSite::ALL
            .into_iter()
            .map(Mutation::Site)
            .chain(Flag::ALL.into_iter().map(Mutation::Flag))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Mutation::Site(s) => s.name(),
            Mutation::Flag(f) => f.name(),
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mutation::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mutation `{s}`"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mutations(BTreeSet<Mutation>);

impl Mutations {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, m: Mutation) -> Self {
        self.0.insert(m);
        self
    }

    pub fn site_enabled(&self, site: MaintenanceSite) -> bool {
        !self.0.contains(&Mutation::Site(site))
    }

    pub fn has(&self, flag: Flag) -> bool {
        self.0.contains(&Mutation::Flag(flag))
    }

    pub fn iter(&self) -> impl Iterator<Item = Mutation> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<Mutation> for Mutations {
    fn from_iter<T: IntoIterator<Item = Mutation>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RmmError {
    #[error("the System Realm already exists")]
    AlreadyInitialized,
    #[error("no System Realm")]
    SystemRealmMissing,
    #[error("need {needed} granules, {free} free")]
    InsufficientGranules { needed: usize, free: usize },
    #[error("no realm {0}")]
    NoSuchRealm(RealmId),
    #[error("realm {realm} is {state}, cannot {op}")]
    WrongState {
        realm: RealmId,
        state: RealmState,
        op: &'static str,
    },
    #[error("image authentication failed")]
    AuthFailure,
    #[error("image hash does not match its header")]
    MeasurementMismatch,
    #[error("image rejected: {0}")]
    BadImage(String),
    #[error("image of {len} bytes does not fit {room}")]
    ImageTooLarge { len: usize, room: u64 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no free container window")]
    NoFreeSlot,
    #[error("reply rejected: {0:?}")]
    UnvalidatedReply(RejectReason),
    #[error("{0} is not mapped")]
    Unmapped(Ipa),
    #[error("{granule} is not owned by realm {realm}")]
    NotOwner { granule: GranuleId, realm: RealmId },
    #[error("a {0} buffer is already registered")]
    DuplicateKind(BufferKind),
    #[error("buffer of {size} bytes exceeds the cap of {cap}")]
    BufferTooLarge { size: u64, cap: u64 },
    #[error("syscall has pointer arguments but no data buffer is registered")]
    NoSharedBuffer,
    #[error("argument of {len} bytes exceeds the {size}-byte data buffer")]
    BufferOverflow { len: u64, size: u64 },
    #[error("pointer {0} is outside the container")]
    BadAddress(Ipa),
    #[error(transparent)]
    Rtt(#[from] RttError),
    #[error(transparent)]
    Granule(#[from] GranuleError),
}

impl RmmError {
    /// Errors that a trap handler reports back to the container instead of
    /// failing the operation.
    pub fn errno(&self) -> Option<i64> {
        match self {
            RmmError::NoSharedBuffer => Some(crate::system_realm::errno::ENOBUFS),
            RmmError::BufferOverflow { .. } => Some(crate::system_realm::errno::E2BIG),
            RmmError::BadAddress(_) => Some(crate::system_realm::errno::EFAULT),
            _ => None,
        }
    }

    pub(crate) fn tag(&self) -> &'static str {
        match self {
            RmmError::AlreadyInitialized => "already-initialized",
            RmmError::SystemRealmMissing => "system-realm-missing",
            RmmError::InsufficientGranules { .. } => "insufficient-granules",
            RmmError::NoSuchRealm(_) => "no-such-realm",
            RmmError::WrongState { .. } => "wrong-state",
            RmmError::AuthFailure => "auth-failure",
            RmmError::MeasurementMismatch => "measurement-mismatch",
            RmmError::BadImage(_) => "bad-image",
            RmmError::ImageTooLarge { .. } => "image-too-large",
            RmmError::InvalidRequest(_) => "invalid-request",
            RmmError::NoFreeSlot => "no-free-slot",
            RmmError::UnvalidatedReply(_) => "unvalidated-reply",
            RmmError::Unmapped(_) => "unmapped",
            RmmError::NotOwner { .. } => "not-owner",
            RmmError::DuplicateKind(_) => "duplicate-kind",
            RmmError::BufferTooLarge { .. } => "buffer-too-large",
            RmmError::NoSharedBuffer => "no-shared-buffer",
            RmmError::BufferOverflow { .. } => "buffer-overflow",
            RmmError::BadAddress(_) => "bad-address",
            RmmError::Rtt(_) => "rtt",
            RmmError::Granule(_) => "granule",
        }
    }
}

/// Per-container counters maintained as events are produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub switches: u64,
    pub syscall_traps: u64,
    pub abort_traps: u64,
    pub irq_traps: u64,
    pub maintenance: u64,
    pub faults: u64,
}

/// A runtime check that did not hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantFailure {
    pub step: u64,
    pub invariant: &'static str,
    pub detail: String,
}

/// A data access by a realm that the stage-2 walk refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemFault {
    pub ipa: Ipa,
    pub write: bool,
    pub reason: Stage2Fault,
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub pool_size: usize,
    pub rtt_levels: u8,
    pub provisioning_key: Key,
    pub mutations: Mutations,
}

impl WorldConfig {
    pub fn new(pool_size: usize) -> Self {
        Self {
            pool_size,
            rtt_levels: DEFAULT_LEVELS,
            provisioning_key: default_provisioning_key(),
            mutations: Mutations::none(),
        }
    }
}

/// Key used when a scenario does not provide its own.
pub fn default_provisioning_key() -> Key {
    Key::from_bytes(*b"fasco-sim demo provisioning key!")
}

#[derive(Debug, Clone)]
pub struct World {
    pub(crate) gs: GranuleSpace,
    pub(crate) trace: Trace,
    pub(crate) ledger: CoherenceLedger,
    pub(crate) mutations: Mutations,
    pub(crate) provisioning: Key,
    pub(crate) levels: u8,
    pub(crate) realms: BTreeMap<RealmId, RealmDescriptor>,
    pub(crate) next_realm: u32,
    pub(crate) system: Option<SystemServices>,
    pub(crate) host: TrimOs,
    /// Vector base and stage-1 root currently installed on the CPU.
    pub(crate) cpu: RegisterSnapshot,
    pub(crate) subject: Option<RealmId>,
    pub(crate) counters: BTreeMap<RealmId, Counters>,
    pub(crate) failures: Vec<InvariantFailure>,
    pub(crate) ever_delegated: BTreeSet<GranuleId>,
}

impl World {
    pub fn new(config: WorldConfig) -> Self {
        let mut gs = GranuleSpace::new(config.pool_size);
        if config.mutations.has(Flag::SkipWipe) {
            gs.set_wipe_on_release(false);
        }
        Self {
            gs,
            trace: Trace::new(),
            ledger: CoherenceLedger::new(),
            mutations: config.mutations,
            provisioning: config.provisioning_key,
            levels: config.rtt_levels,
            realms: BTreeMap::new(),
            next_realm: 1,
            system: None,
            host: TrimOs::new(),
            cpu: RegisterSnapshot { vbar: 0, ttbr0: 0 },
            subject: None,
            counters: BTreeMap::new(),
            failures: Vec::new(),
            ever_delegated: BTreeSet::new(),
        }
    }

    pub fn granules(&self) -> &GranuleSpace {
        &self.gs
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn ledger(&self) -> &CoherenceLedger {
        &self.ledger
    }

    pub fn host(&self) -> &TrimOs {
        &self.host
    }

    pub fn host_mut(&mut self) -> &mut TrimOs {
        &mut self.host
    }

    pub fn mutations(&self) -> &Mutations {
        &self.mutations
    }

    pub fn provisioning_key(&self) -> &Key {
        &self.provisioning
    }

    pub fn rtt_levels(&self) -> u8 {
        self.levels
    }

    /// Id the next created container will receive.
    pub fn next_realm_id(&self) -> RealmId {
        RealmId(self.next_realm)
    }

    pub fn descriptor(&self, realm: RealmId) -> Option<&RealmDescriptor> {
        self.realms.get(&realm)
    }

    pub fn realms(&self) -> impl Iterator<Item = &RealmDescriptor> {
        self.realms.values()
    }

    pub fn containers(&self) -> impl Iterator<Item = &RealmDescriptor> {
        self.realms
            .values()
            .filter(|d| d.kind == RealmKind::Container)
    }

    pub fn system(&self) -> Option<&SystemServices> {
        self.system.as_ref()
    }

    pub fn cpu_registers(&self) -> RegisterSnapshot {
        self.cpu
    }

    pub fn counters(&self) -> &BTreeMap<RealmId, Counters> {
        &self.counters
    }

    pub fn failures(&self) -> &[InvariantFailure] {
        &self.failures
    }

    /// Granules that have at some point belonged to a realm.
    pub fn ever_delegated(&self) -> &BTreeSet<GranuleId> {
        &self.ever_delegated
    }

    /// Emits an attribution marker and makes `realm` the subject of the
    /// counters until the next marker.
    pub fn mark(&mut self, realm: Option<RealmId>, label: &'static str) {
        self.subject = realm;
        self.trace.emit(Event::Mark { realm, label });
    }

    pub fn note(&mut self, what: impl Into<String>) {
        self.trace.emit(Event::Harness { what: what.into() });
    }

    pub(crate) fn fail(&mut self, invariant: &'static str, detail: impl Into<String>) {
        let step = self.trace.step();
        let detail = detail.into();
        self.trace.emit(Event::Harness {
            what: format!("invariant {invariant} failed: {detail}"),
        });
        self.failures.push(InvariantFailure {
            step,
            invariant,
            detail,
        });
    }

    pub(crate) fn bump(&mut self, f: impl FnOnce(&mut Counters)) {
        if let Some(r) = self.subject {
            f(self.counters.entry(r).or_default());
        }
    }

    pub(crate) fn desc(&self, realm: RealmId) -> Result<&RealmDescriptor, RmmError> {
        self.realms.get(&realm).ok_or(RmmError::NoSuchRealm(realm))
    }

    pub(crate) fn desc_mut(&mut self, realm: RealmId) -> Result<&mut RealmDescriptor, RmmError> {
        self.realms
            .get_mut(&realm)
            .ok_or(RmmError::NoSuchRealm(realm))
    }

    pub(crate) fn container(&self, realm: RealmId) -> Result<&RealmDescriptor, RmmError> {
        match self.realms.get(&realm) {
            Some(d) if d.kind == RealmKind::Container => Ok(d),
            _ => Err(RmmError::NoSuchRealm(realm)),
        }
    }

    /// Moves a realm along the lifecycle graph, recording any illegal edge.
    pub(crate) fn set_state(&mut self, realm: RealmId, next: RealmState) {
        let Some(d) = self.realms.get_mut(&realm) else {
            return;
        };
        let prev = d.state;
        d.state = next;
        if !prev.may_become(next) {
            self.fail(
                "STATE-MACHINE-SOUNDNESS",
                format!("realm {realm} moved {prev} -> {next}"),
            );
        }
    }

    pub(crate) fn rsi_log(
        &mut self,
        name: &'static str,
        realm: RealmId,
        detail: impl Into<String>,
        outcome: impl Into<String>,
    ) {
        self.trace.emit(Event::Rsi {
            name,
            realm,
            detail: detail.into(),
            outcome: outcome.into(),
        });
    }

    /// Emits a domain switch, installs the destination's registers and
    /// audits the destination's cached translations before it runs.
    pub(crate) fn switch(&mut self, from: Domain, to: Domain, reason: &'static str) {
        self.trace.emit(Event::Switch { from, to, reason });
        self.bump(|c| c.switches += 1);
        let realm = match to {
            Domain::Container(r) => Some(r),
            Domain::SystemRealm => Some(SYSTEM_REALM),
            Domain::Rmm => None,
        };
        if let Some(r) = realm {
            if let Some(d) = self.realms.get(&r) {
                self.cpu = RegisterSnapshot {
                    vbar: d.vbar,
                    ttbr0: d.ttbr0,
                };
            }
            self.audit_tlb(r, "switch");
        }
    }

    pub(crate) fn audit_tlb(&mut self, realm: RealmId, provenance: &'static str) {
        let World {
            realms,
            gs,
            ledger,
            trace,
            ..
        } = self;
        let Some(tree) = realms.get(&realm).and_then(|d| d.rtt.as_ref()) else {
            return;
        };
        ledger.audit_tlb(
            world_of(realm),
            |ipa| tree.resolve(gs, ipa, crate::granule::AccessKind::Read),
            provenance,
            trace,
        );
    }

    // ---- maintenance, gated by the mutation set ----

    pub(crate) fn maint_clean(
        &mut self,
        site: MaintenanceSite,
        g: GranuleId,
        offset: usize,
        len: usize,
        by: WorldId,
    ) {
        if len == 0 || !self.mutations.site_enabled(site) {
            return;
        }
        self.ledger
            .dcache_clean(g, offset, len, by, site.name(), &mut self.trace);
        self.bump(|c| c.maintenance += 1);
    }

    pub(crate) fn maint_icache(&mut self, site: MaintenanceSite, g: GranuleId, by: WorldId) {
        if !self.mutations.site_enabled(site) {
            return;
        }
        self.ledger
            .icache_invalidate(g, by, site.name(), &mut self.trace);
        self.bump(|c| c.maintenance += 1);
    }

    pub(crate) fn maint_tlbi(
        &mut self,
        site: MaintenanceSite,
        realm: WorldId,
        start: Ipa,
        end: Ipa,
        by: WorldId,
    ) {
        if !self.mutations.site_enabled(site) {
            return;
        }
        self.ledger
            .tlb_invalidate(realm, start, end, by, site.name(), &mut self.trace);
        self.bump(|c| c.maintenance += 1);
    }

    /// Cleans the lines backing `[ipa, ipa + len)` in `realm`'s tree.
    pub(crate) fn maint_clean_ipa(
        &mut self,
        site: MaintenanceSite,
        realm: RealmId,
        ipa: Ipa,
        len: u64,
        by: WorldId,
    ) {
        for (g, off, n) in self.monitor_chunks(realm, ipa, len) {
            self.maint_clean(site, g, off, n, by);
        }
    }

    // ---- memory access ----

    /// Splits `[ipa, ipa + len)` into per-granule pieces using the realm's
    /// tree without touching the TLB. Unbacked pages are skipped.
    pub(crate) fn monitor_chunks(
        &self,
        realm: RealmId,
        ipa: Ipa,
        len: u64,
    ) -> Vec<(GranuleId, usize, usize)> {
        let mut out = Vec::new();
        let Some(tree) = self.realms.get(&realm).and_then(|d| d.rtt.as_ref()) else {
            return out;
        };
        let mut at = ipa.0;
        let end = ipa.0.saturating_add(len);
        while at < end {
            let page_end = (Ipa(at).page().0 + GRANULE_SIZE as u64).min(end);
            if let Some(crate::rtt::RttEntry::Assigned { granule, .. }) = tree.leaf(Ipa(at)) {
                out.push((granule, Ipa(at).page_offset(), (page_end - at) as usize));
            }
            at = page_end;
        }
        out
    }

    /// Monitor read through a realm's tree (root PAS, no protection check).
    pub(crate) fn monitor_read_ipa(
        &mut self,
        realm: RealmId,
        ipa: Ipa,
        len: u64,
        provenance: &'static str,
    ) -> Vec<u8> {
        let mut out = Vec::with_capacity(len as usize);
        for (g, off, n) in self.monitor_chunks(realm, ipa, len) {
            let _ = self
                .ledger
                .check_read(WorldId::Root, g, off, n, provenance, &mut self.trace);
            out.extend_from_slice(&self.gs.monitor_read(g, off, n).expect("in bounds"));
        }
        out
    }

    pub(crate) fn monitor_write_ipa(&mut self, realm: RealmId, ipa: Ipa, data: &[u8]) {
        let mut done = 0usize;
        for (g, off, n) in self.monitor_chunks(realm, ipa, data.len() as u64) {
            self.gs
                .monitor_write(g, off, &data[done..done + n])
                .expect("in bounds");
            self.ledger.record_write(WorldId::Root, g, off, n);
            done += n;
        }
    }

    /// Stage-2 translation performed on behalf of `realm`, consulting and
    /// refilling its TLB.
    pub(crate) fn translate(
        &mut self,
        realm: RealmId,
        ipa: Ipa,
        kind: crate::granule::AccessKind,
        provenance: &'static str,
    ) -> Walk {
        let World {
            realms,
            gs,
            ledger,
            trace,
            ..
        } = self;
        let Some(tree) = realms.get(&realm).and_then(|d| d.rtt.as_ref()) else {
            return Walk::Fault(Stage2Fault::Unmapped);
        };
        let w = tree.walk(gs, trace, ipa, kind);
        let who = world_of(realm);
        let _ = ledger.check_translation(who, ipa, w, provenance, trace);
        ledger.tlb_fill(who, ipa, w);
        if !w.is_translated() && realm != SYSTEM_REALM {
            self.bump(|c| c.faults += 1);
        }
        w
    }

    fn realm_chunks(
        &mut self,
        realm: RealmId,
        ipa: Ipa,
        len: u64,
        kind: crate::granule::AccessKind,
        provenance: &'static str,
    ) -> Result<Vec<(GranuleId, usize, usize)>, MemFault> {
        let mut out = Vec::new();
        let mut at = ipa.0;
        let end = ipa.0.saturating_add(len);
        while at < end {
            let page_end = (Ipa(at).page().0 + GRANULE_SIZE as u64).min(end);
            match self.translate(realm, Ipa(at), kind, provenance) {
                Walk::Translated { granule, offset } => {
                    out.push((granule, offset, (page_end - at) as usize))
                }
                Walk::Fault(reason) => {
                    return Err(MemFault {
                        ipa: Ipa(at),
                        write: kind == crate::granule::AccessKind::Write,
                        reason,
                    })
                }
            }
            at = page_end;
        }
        Ok(out)
    }

    /// Data read by a realm through its own stage-2 tables.
    pub(crate) fn realm_read(
        &mut self,
        realm: RealmId,
        ipa: Ipa,
        len: u64,
        provenance: &'static str,
    ) -> Result<Vec<u8>, MemFault> {
        let who = world_of(realm);
        let chunks = self.realm_chunks(
            realm,
            ipa,
            len,
            crate::granule::AccessKind::Read,
            provenance,
        )?;
        let mut out = Vec::with_capacity(len as usize);
        for (g, off, n) in chunks {
            let _ = self
                .ledger
                .check_read(who, g, off, n, provenance, &mut self.trace);
            let bytes = self
                .gs
                .read(who, g, off, n, &mut self.trace)
                .map_err(|_| MemFault {
                    ipa,
                    write: false,
                    reason: Stage2Fault::GptDenied,
                })?;
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub(crate) fn realm_write(
        &mut self,
        realm: RealmId,
        ipa: Ipa,
        data: &[u8],
        provenance: &'static str,
    ) -> Result<(), MemFault> {
        let who = world_of(realm);
        let chunks = self.realm_chunks(
            realm,
            ipa,
            data.len() as u64,
            crate::granule::AccessKind::Write,
            provenance,
        )?;
        let mut done = 0usize;
        for (g, off, n) in chunks {
            self.gs
                .write(who, g, off, &data[done..done + n], &mut self.trace)
                .map_err(|_| MemFault {
                    ipa,
                    write: true,
                    reason: Stage2Fault::GptDenied,
                })?;
            self.ledger.record_write(who, g, off, n);
            done += n;
        }
        Ok(())
    }

    /// Instruction fetch of the 4 bytes at `pc`.
    pub(crate) fn realm_fetch(&mut self, realm: RealmId, pc: Ipa) -> Result<(), MemFault> {
        let who = world_of(realm);
        match self.translate(realm, pc, crate::granule::AccessKind::Exec, "fetch") {
            Walk::Translated { granule, offset } => {
                let _ = self
                    .ledger
                    .check_fetch(who, granule, offset, 4, "fetch", &mut self.trace);
                Ok(())
            }
            Walk::Fault(reason) => Err(MemFault {
                ipa: pc,
                write: false,
                reason,
            }),
        }
    }

    /// Delegates `g` to `to` and cleans whatever the host left in the cache.
    pub(crate) fn delegate_clean(&mut self, g: GranuleId, to: WorldId) -> Result<(), RmmError> {
        self.gs.delegate(g, to, &mut self.trace)?;
        self.ever_delegated.insert(g);
        self.maint_clean(
            MaintenanceSite::DelegateClean,
            g,
            0,
            GRANULE_SIZE,
            WorldId::Root,
        );
        Ok(())
    }

    /// Scrubs and returns `g` to the host.
    pub(crate) fn release_granule(&mut self, g: GranuleId) -> Result<(), RmmError> {
        if !self.mutations.has(Flag::SkipWipe) {
            self.ledger.record_write(WorldId::Root, g, 0, GRANULE_SIZE);
        }
        self.maint_clean(
            MaintenanceSite::UndelegateClean,
            g,
            0,
            GRANULE_SIZE,
            WorldId::Root,
        );
        self.gs.undelegate(g, &mut self.trace)?;
        Ok(())
    }

    /// The host takes back every granule a realm ever held and reads it for
    /// reuse. Returns how many granules it read.
    pub fn host_reclaim(&mut self) -> usize {
        let released: Vec<GranuleId> = self
            .ever_delegated
            .iter()
            .copied()
            .filter(|&g| self.gs.owner(g) == Ok(WorldId::NormalWorld))
            .collect();
        for &g in &released {
            if self
                .gs
                .read(WorldId::NormalWorld, g, 0, GRANULE_SIZE, &mut self.trace)
                .is_ok()
            {
                let _ = self.ledger.check_read(
                    WorldId::NormalWorld,
                    g,
                    0,
                    GRANULE_SIZE,
                    "host-reclaim",
                    &mut self.trace,
                );
            }
        }
        released.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle_graph_edges() {
        use RealmState::*;
        assert!(New.may_become(ImageLoaded));
        assert!(Running.may_become(TrapPending));
        assert!(TrapPending.may_become(Running));
        assert!(New.may_become(Destroyed));
        assert!(!New.may_become(Running));
        assert!(!Runnable.may_become(TrapPending));
        assert!(!Destroyed.may_become(Destroyed));
        assert!(!Destroyed.may_become(Running));
    }

    #[test]
    fn mutation_names_round_trip() {
        for m in Mutation::all() {
            assert_eq!(m.name().parse::<Mutation>().unwrap(), m);
        }
        assert_eq!(Mutation::all().len(), 19);
        assert!("nope".parse::<Mutation>().is_err());
    }
}
