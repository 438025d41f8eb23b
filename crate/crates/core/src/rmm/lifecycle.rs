// SPDX-License-Identifier: Apache-2.0

//! Realm creation, image loading, shared-buffer registration and teardown.

use std::collections::BTreeSet;

use crate::coherence::MaintenanceSite;
use crate::cpu::{decode_program, BufferKind};
use crate::granule::{AccessKind, GranuleId, RealmId, WorldId, GRANULE_SIZE};
use crate::image::{EncryptedImage, ImageError};
use crate::rtt::{Ipa, NodePool, Perms, RttEntry, RttTree, Stage2Fault, Walk, ENTRIES_PER_NODE};
use crate::system_realm::SystemServices;

use super::{
    ttbr0_token, vbar_token, world_of, Flag, RealmDescriptor, RealmKind, RealmState,
    RegisterSnapshot, RmmError, SharedBufferRecord, World, BOUNCE_PAGES, BOUNCE_SIZE, PARAM_LEN,
    PARAM_MAGIC, SYSTEM_REALM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemRealmConfig {
    /// Private System Realm pages, not counting the host bounce buffer.
    pub granules: usize,
}

impl Default for SystemRealmConfig {
    fn default() -> Self {
        Self { granules: 4 }
    }
}

/// Resources for one container realm. Offsets are relative to the start of
/// the container's IPA window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerSpec {
    pub granules: usize,
    pub entry: u64,
    pub stack_size: u64,
    pub max_shared_buffer: u64,
}

impl ContainerSpec {
    pub fn new(granules: usize) -> Self {
        Self {
            granules,
            entry: 0,
            stack_size: GRANULE_SIZE as u64,
            max_shared_buffer: BOUNCE_SIZE,
        }
    }
}

fn encode_param(realm: RealmId, spec: &ContainerSpec) -> [u8; PARAM_LEN] {
    let mut p = [0u8; PARAM_LEN];
    p[0..4].copy_from_slice(PARAM_MAGIC);
    p[4..8].copy_from_slice(&realm.0.to_le_bytes());
    p[8..12].copy_from_slice(&(spec.granules as u32).to_le_bytes());
    p[16..24].copy_from_slice(&spec.entry.to_le_bytes());
    p[24..32].copy_from_slice(&spec.stack_size.to_le_bytes());
    p
}

impl World {
    /// Bytes of IPA space covered by one container window.
    pub fn window_span(&self) -> u64 {
        RttTree::entry_span(self.levels, 0)
    }

    /// Granules consumed by one container of `granules` data pages: the pages
    /// themselves, the System Realm table nodes over its window, and the
    /// container's own tree.
    pub fn container_demand(&self, granules: usize) -> usize {
        let base = self.window_span();
        let nodes =
            RttTree::nodes_for_range(self.levels, base, base + (granules * GRANULE_SIZE) as u64);
        granules + nodes + 1 + nodes
    }

    pub fn system_demand(&self, config: SystemRealmConfig) -> usize {
        let pages = config.granules + BOUNCE_PAGES;
        1 + RttTree::nodes_for_range(self.levels, 0, (pages * GRANULE_SIZE) as u64) + pages
    }

    fn log_result<T>(
        &mut self,
        name: &'static str,
        realm: RealmId,
        detail: String,
        res: Result<T, RmmError>,
        ok: impl FnOnce(&T) -> String,
    ) -> Result<T, RmmError> {
        let outcome = match &res {
            Ok(v) => ok(v),
            Err(e) => format!("error:{}", e.tag()),
        };
        self.rsi_log(name, realm, detail, outcome);
        res
    }

    pub fn rsi_create_system_realm(&mut self, config: SystemRealmConfig) -> Result<(), RmmError> {
        let res = self.create_system_realm_inner(config);
        self.log_result(
            "create_system_realm",
            SYSTEM_REALM,
            format!("granules={}", config.granules),
            res,
            |_| "runnable".into(),
        )
    }

    fn create_system_realm_inner(&mut self, config: SystemRealmConfig) -> Result<(), RmmError> {
        if self.system.is_some() {
            return Err(RmmError::AlreadyInitialized);
        }
        let pages = config.granules + BOUNCE_PAGES;
        let needed = self.system_demand(config);
        let ids = self
            .gs
            .find_free(needed)
            .ok_or(RmmError::InsufficientGranules {
                needed,
                free: self.gs.free_count(),
            })?;
        for &g in &ids {
            self.delegate_clean(g, WorldId::SystemRealm)?;
        }
        let node_count = needed - pages;
        let (nodes, data) = ids.split_at(node_count);
        let mut pool: NodePool = nodes.iter().copied().collect();
        let mut tree = RttTree::new(WorldId::SystemRealm, self.levels, &mut self.gs, &mut pool)?;
        for (i, &g) in data.iter().enumerate() {
            tree.map(
                &mut self.gs,
                &mut pool,
                Ipa((i * GRANULE_SIZE) as u64),
                g,
                Perms::RW,
            )?;
        }
        let bounce: Vec<GranuleId> = data[config.granules..].to_vec();
        for &g in &bounce {
            self.gs.share(g, WorldId::NormalWorld, &mut self.trace)?;
        }
        let bounce_va = Ipa((config.granules * GRANULE_SIZE) as u64);
        let len = (pages * GRANULE_SIZE) as u64;
        self.realms.insert(
            SYSTEM_REALM,
            RealmDescriptor {
                id: SYSTEM_REALM,
                kind: RealmKind::System,
                state: RealmState::Runnable,
                rtt: Some(tree),
                ttbr0: ttbr0_token(SYSTEM_REALM),
                vbar: vbar_token(SYSTEM_REALM),
                entry_point: Ipa(0),
                stack_pointer: Ipa(len),
                protected_regions: vec![(Ipa(0), len)],
                saved_context: None,
                live: None,
                measurement: None,
                slot: 0,
                private: data.to_vec(),
                system_nodes: nodes.to_vec(),
                buffers: Vec::new(),
                max_shared_buffer: 0,
                program: Vec::new(),
                image_len: 0,
                pending: None,
                forwarded: None,
                exited: None,
                observations: Vec::new(),
                system_snapshot: None,
            },
        );
        self.cpu = RegisterSnapshot {
            vbar: vbar_token(SYSTEM_REALM),
            ttbr0: ttbr0_token(SYSTEM_REALM),
        };
        self.system = Some(SystemServices::new(bounce, bounce_va));
        Ok(())
    }

    /// Creates a container realm in state `New`.
    ///
    /// The container's pages are first mapped into the System Realm's tree,
    /// which writes the runtime parameter block. The window is then cloned
    /// into a fresh container tree, revoked in the System Realm tree, and the
    /// pages handed over to the container. Finally the System Realm probes
    /// the window to confirm it can no longer reach it.
    pub fn rsi_create_container_realm(&mut self, spec: ContainerSpec) -> Result<RealmId, RmmError> {
        let res = self.create_container_inner(spec);
        let realm = res.as_ref().copied().unwrap_or(RealmId(self.next_realm));
        self.log_result(
            "create_container",
            realm,
            format!("granules={}", spec.granules),
            res,
            |_| "new".into(),
        )
    }

    fn create_container_inner(&mut self, spec: ContainerSpec) -> Result<RealmId, RmmError> {
        if self.system.is_none() {
            return Err(RmmError::SystemRealmMissing);
        }
        let span = self.window_span();
        let len = (spec.granules * GRANULE_SIZE) as u64;
        let page = GRANULE_SIZE as u64;
        if spec.granules < 2 || len > span {
            return Err(RmmError::InvalidRequest(format!(
                "{} granules do not fit a window",
                spec.granules
            )));
        }
        if !spec.entry.is_multiple_of(page) || spec.entry + spec.stack_size >= len - page {
            return Err(RmmError::InvalidRequest(
                "entry point and stack do not fit".into(),
            ));
        }
        let used: BTreeSet<usize> = self
            .containers()
            .filter(|d| d.state != RealmState::Destroyed)
            .map(|d| d.slot)
            .collect();
        let slot = (1..ENTRIES_PER_NODE)
            .find(|s| !used.contains(s))
            .ok_or(RmmError::NoFreeSlot)?;
        let base = Ipa(slot as u64 * span);
        let end = base.add(len);
        let nodes = RttTree::nodes_for_range(self.levels, base.0, end.0);
        let needed = spec.granules + 2 * nodes + 1;
        let ids = self
            .gs
            .find_free(needed)
            .ok_or(RmmError::InsufficientGranules {
                needed,
                free: self.gs.free_count(),
            })?;
        let id = RealmId(self.next_realm);
        self.next_realm += 1;
        let cw = WorldId::ContainerRealm(id);
        let (data, rest) = ids.split_at(spec.granules);
        let (sys_nodes, own_nodes) = rest.split_at(nodes);
        for &g in data.iter().chain(sys_nodes) {
            self.delegate_clean(g, WorldId::SystemRealm)?;
        }
        for &g in own_nodes {
            self.delegate_clean(g, cw)?;
        }

        // The System Realm sees the new pages first.
        let mut sys_pool: NodePool = sys_nodes.iter().copied().collect();
        {
            let World { realms, gs, .. } = self;
            let tree = realms
                .get_mut(&SYSTEM_REALM)
                .and_then(|d| d.rtt.as_mut())
                .ok_or(RmmError::SystemRealmMissing)?;
            for (i, &g) in data.iter().enumerate() {
                tree.map(gs, &mut sys_pool, base.add(i as u64 * page), g, Perms::RWX)?;
            }
        }
        let param_ipa = base.add(len - page);
        let param = encode_param(id, &spec);
        let _ = self.realm_write(SYSTEM_REALM, param_ipa, &param, "param-write");
        self.maint_clean_ipa(
            MaintenanceSite::ParamClean,
            SYSTEM_REALM,
            param_ipa,
            PARAM_LEN as u64,
            WorldId::SystemRealm,
        );

        // Clone the window, then take it away from the System Realm.
        let mut own_pool: NodePool = own_nodes.iter().copied().collect();
        let skip_revoke = self.mutations.has(Flag::SkipRevoke);
        let ctree = {
            let World { realms, gs, .. } = self;
            let tree = realms
                .get_mut(&SYSTEM_REALM)
                .and_then(|d| d.rtt.as_mut())
                .expect("system tree");
            let ctree = tree.clone_range(gs, &mut own_pool, cw, base.0, end.0)?;
            if !skip_revoke {
                tree.revoke_range(gs, base, end)?;
            }
            ctree
        };
        self.maint_tlbi(
            MaintenanceSite::RevokeTlbInvalidate,
            WorldId::SystemRealm,
            base,
            end,
            WorldId::Root,
        );
        for &g in data {
            self.gs.transfer(g, cw, &mut self.trace)?;
        }

        self.realms.insert(
            id,
            RealmDescriptor {
                id,
                kind: RealmKind::Container,
                state: RealmState::New,
                rtt: Some(ctree),
                ttbr0: 0,
                vbar: 0,
                entry_point: base.add(spec.entry),
                stack_pointer: param_ipa,
                protected_regions: vec![(base, len)],
                saved_context: None,
                live: None,
                measurement: None,
                slot,
                private: data.to_vec(),
                system_nodes: sys_nodes.to_vec(),
                buffers: Vec::new(),
                max_shared_buffer: spec.max_shared_buffer,
                program: Vec::new(),
                image_len: 0,
                pending: None,
                forwarded: None,
                exited: None,
                observations: Vec::new(),
                system_snapshot: None,
            },
        );

        // The System Realm must now fault on every page of the window.
        for i in 0..spec.granules as u64 {
            let ipa = base.add(i * page);
            let w = self.translate(SYSTEM_REALM, ipa, AccessKind::Read, "isolation-probe");
            if w != Walk::Fault(Stage2Fault::Empty) {
                self.fail(
                    "REVOKE-COMPLETENESS",
                    format!("System Realm walk of {ipa} gave {w:?} after revocation"),
                );
            }
        }
        Ok(id)
    }

    /// Decrypts, verifies and installs a container image.
    pub fn rsi_load_image(
        &mut self,
        realm: RealmId,
        image: &EncryptedImage,
    ) -> Result<[u8; 32], RmmError> {
        let res = self.load_image_inner(realm, image);
        self.log_result(
            "load_image",
            realm,
            format!("bytes={}", image.as_bytes().len()),
            res,
            |m| format!("measurement={}", &hex::encode(m)[..16]),
        )
    }

    fn load_image_inner(
        &mut self,
        realm: RealmId,
        image: &EncryptedImage,
    ) -> Result<[u8; 32], RmmError> {
        let d = self.container(realm)?;
        if d.state != RealmState::New {
            return Err(RmmError::WrongState {
                realm,
                state: d.state,
                op: "load image",
            });
        }
        let (entry, room) = {
            let stack = d.stack_pointer.0 - d.entry_point.0;
            let stack_size = u64::from_le_bytes(
                self.gs
                    .monitor_read(d.private[d.private.len() - 1], 24, 8)?
                    .try_into()
                    .expect("8 bytes"),
            );
            (d.entry_point, stack.saturating_sub(stack_size))
        };
        let (plaintext, measurement) = image.open(&self.provisioning).map_err(|e| match e {
            ImageError::AuthFailure => RmmError::AuthFailure,
            ImageError::MeasurementMismatch => RmmError::MeasurementMismatch,
            other => RmmError::BadImage(other.to_string()),
        })?;
        if plaintext.len() as u64 > room {
            return Err(RmmError::ImageTooLarge {
                len: plaintext.len(),
                room,
            });
        }
        let program = decode_program(&plaintext).map_err(|e| RmmError::BadImage(e.to_string()))?;
        self.monitor_write_ipa(realm, entry, &plaintext);
        for (g, off, n) in self.monitor_chunks(realm, entry, plaintext.len() as u64) {
            self.maint_clean(MaintenanceSite::ImageDcacheClean, g, off, n, WorldId::Root);
            self.maint_icache(MaintenanceSite::ImageIcacheInvalidate, g, WorldId::Root);
        }
        let d = self.desc_mut(realm)?;
        d.measurement = Some(measurement);
        d.program = program;
        d.image_len = plaintext.len();
        self.set_state(realm, RealmState::ImageLoaded);
        Ok(measurement)
    }

    /// Installs the container's stage-1 root and vector base, keeping the
    /// System Realm's pair for restoration on teardown.
    pub fn init_container_runtime(&mut self, realm: RealmId) -> Result<(), RmmError> {
        let res = (|| {
            let d = self.container(realm)?;
            if d.state != RealmState::ImageLoaded {
                return Err(RmmError::WrongState {
                    realm,
                    state: d.state,
                    op: "initialize runtime",
                });
            }
            let sys = self.desc(SYSTEM_REALM)?;
            let snapshot = RegisterSnapshot {
                vbar: sys.vbar,
                ttbr0: sys.ttbr0,
            };
            let d = self.desc_mut(realm)?;
            d.system_snapshot = Some(snapshot);
            d.ttbr0 = ttbr0_token(realm);
            d.vbar = vbar_token(realm);
            self.set_state(realm, RealmState::Runnable);
            Ok(())
        })();
        self.log_result("init_runtime", realm, String::new(), res, |_| {
            "runnable".into()
        })
    }

    /// Shares a range of container memory with the System Realm.
    pub fn rsi_register_shared_buffer(
        &mut self,
        realm: RealmId,
        kind: BufferKind,
        va: Ipa,
        size: u64,
    ) -> Result<SharedBufferRecord, RmmError> {
        let res = self.register_buffer_inner(realm, kind, va, size);
        self.log_result(
            "register_shared_buffer",
            realm,
            format!("kind={kind} va={va} size={size}"),
            res,
            |r| format!("pa={}+{}", r.pa.0, r.pa.1),
        )
    }

    fn register_buffer_inner(
        &mut self,
        realm: RealmId,
        kind: BufferKind,
        va: Ipa,
        size: u64,
    ) -> Result<SharedBufferRecord, RmmError> {
        let d = self.container(realm)?;
        if d.state == RealmState::Destroyed {
            return Err(RmmError::WrongState {
                realm,
                state: d.state,
                op: "register a buffer",
            });
        }
        if d.buffer(kind).is_some() {
            return Err(RmmError::DuplicateKind(kind));
        }
        if !va.is_page_aligned() || size == 0 {
            return Err(RmmError::InvalidRequest(
                "buffers are page aligned and non-empty".into(),
            ));
        }
        let cap = d.max_shared_buffer.min(BOUNCE_SIZE);
        if size > cap {
            return Err(RmmError::BufferTooLarge { size, cap });
        }
        let page = GRANULE_SIZE as u64;
        let pages = size.div_ceil(page);
        let tree = d.rtt.as_ref().expect("live container has a tree");
        let mut granules = Vec::new();
        for i in 0..pages {
            let ipa = va.add(i * page);
            match tree.leaf(ipa) {
                Some(RttEntry::Assigned { granule, .. }) => {
                    if self.gs.owner(granule)? != world_of(realm) {
                        return Err(RmmError::NotOwner { granule, realm });
                    }
                    granules.push(granule);
                }
                _ => return Err(RmmError::Unmapped(ipa)),
            }
        }
        for &g in &granules {
            self.gs.share(g, WorldId::SystemRealm, &mut self.trace)?;
        }
        {
            let World { realms, gs, .. } = self;
            let tree = realms
                .get_mut(&SYSTEM_REALM)
                .and_then(|d| d.rtt.as_mut())
                .ok_or(RmmError::SystemRealmMissing)?;
            let mut no_nodes = NodePool::new();
            for (i, &g) in granules.iter().enumerate() {
                let ipa = va.add(i as u64 * page);
                match tree.leaf(ipa) {
                    Some(RttEntry::Assigned { granule, .. }) if granule == g => {}
                    _ => tree.map(gs, &mut no_nodes, ipa, g, Perms::RW)?,
                }
            }
        }
        self.maint_tlbi(
            MaintenanceSite::ShareTlbInvalidate,
            WorldId::SystemRealm,
            va,
            va.add(pages * page),
            WorldId::Root,
        );
        let rec = SharedBufferRecord {
            realm,
            kind,
            va,
            pa: (granules[0], 0),
            size,
            granules,
        };
        self.desc_mut(realm)?.buffers.push(rec.clone());
        Ok(rec)
    }

    /// Tears a container down: buffers revoked, translations removed, every
    /// granule scrubbed and returned to the host. Destroying twice succeeds.
    pub fn destroy_realm(&mut self, realm: RealmId) -> Result<(), RmmError> {
        let d = self.container(realm)?;
        if d.state == RealmState::Destroyed {
            self.rsi_log("destroy", realm, "", "noop");
            return Ok(());
        }
        let res = self.destroy_inner(realm);
        self.log_result("destroy", realm, String::new(), res, |_| "destroyed".into())
    }

    fn destroy_inner(&mut self, realm: RealmId) -> Result<(), RmmError> {
        let span = self.window_span();
        let d = self.desc_mut(realm)?;
        d.pending = None;
        d.forwarded = None;
        d.live = None;
        d.saved_context = None;
        let buffers = std::mem::take(&mut d.buffers);
        let slot = d.slot;
        let ctree = d.rtt.take();
        let private = d.private.clone();
        let snapshot = d.system_snapshot;
        let base = Ipa(slot as u64 * span);

        for rec in &buffers {
            for &g in &rec.granules {
                self.gs.unshare(g, &mut self.trace)?;
            }
        }
        let sys_freed = {
            let World { realms, gs, .. } = self;
            let tree = realms
                .get_mut(&SYSTEM_REALM)
                .and_then(|d| d.rtt.as_mut())
                .ok_or(RmmError::SystemRealmMissing)?;
            tree.release_root_entry(gs, slot)?
        };
        self.maint_tlbi(
            MaintenanceSite::TeardownTlbInvalidate,
            WorldId::SystemRealm,
            base,
            base.add(span),
            WorldId::Root,
        );
        let own_freed = match ctree {
            Some(t) => t.teardown(&mut self.gs)?,
            None => Vec::new(),
        };
        self.ledger.forget_realm(world_of(realm));
        for g in private.into_iter().chain(sys_freed).chain(own_freed) {
            self.release_granule(g)?;
        }
        if let Some(s) = snapshot {
            self.cpu = s;
        }
        self.set_state(realm, RealmState::Destroyed);
        self.audit_tlb(SYSTEM_REALM, "destroy");
        Ok(())
    }
}
