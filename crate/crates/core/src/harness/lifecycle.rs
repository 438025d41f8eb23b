// SPDX-License-Identifier: Apache-2.0

//! The container lifecycle run: create, start, pause, unpause, kill and
//! remove for `n` containers side by side, with per-operation step counts.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cpu::{Arg, Sysno};
use crate::granule::RealmId;
use crate::rmm::{
    DriveOutcome, Mutations, RealmState, RmmError, SystemRealmConfig, World, WorldConfig,
    EXIT_KILLED,
};
use crate::system_realm::{CreateRequest, Policy};

use super::audit::{self, Finding};
use super::metrics::Metrics;
use super::run::{bracket, image_for, ContainerOutcome, Execution, LIFECYCLE_OPS};
use super::scenario::{layout, ProgramBuilder};
use super::HarnessError;

pub const MAX_CONTAINERS: usize = 16;

#[derive(Debug, Clone, Serialize)]
pub struct LifecycleReport {
    pub containers: usize,
    /// Step counts per operation, one map per container.
    pub per_container: Vec<BTreeMap<String, u64>>,
    pub context_roundtrip: bool,
    pub pool_reclaimed: bool,
    pub findings: Vec<Finding>,
    pub metrics: Metrics,
}

impl LifecycleReport {
    /// Every container spent the same number of steps in each operation.
    pub fn uniform(&self) -> bool {
        self.per_container.windows(2).all(|w| w[0] == w[1])
    }

    pub fn render(&self) -> String {
        let mut out = format!("containers={}\n", self.containers);
        if let Some(first) = self.per_container.first() {
            for op in LIFECYCLE_OPS {
                out.push_str(&format!(
                    "{op:<8} {} steps\n",
                    first.get(op).copied().unwrap_or(0)
                ));
            }
        }
        out.push_str(&format!(
            "uniform={} context-roundtrip={} pool-reclaimed={}\n",
            self.uniform(),
            self.context_roundtrip,
            self.pool_reclaimed
        ));
        for f in &self.findings {
            out.push_str(&format!("FAIL {}: {}\n", f.invariant, f.detail));
        }
        out
    }
}

fn workload() -> Vec<crate::cpu::Instr> {
    ProgramBuilder::new()
        .share_data(layout::BUFFER, layout::BUFFER_SIZE)
        .syscall(Sysno::Getpid, vec![])
        .store(layout::HEAP, b"lifecycle")
        .syscall(
            Sysno::Write,
            vec![Arg::Imm(1), Arg::Ptr(layout::HEAP), Arg::Imm(9)],
        )
        .exit(0)
        .build()
}

/// Pool large enough for [`MAX_CONTAINERS`] lifecycle containers.
pub fn lifecycle_pool() -> usize {
    let probe = World::new(WorldConfig::new(1));
    probe.system_demand(SystemRealmConfig::default())
        + MAX_CONTAINERS * probe.container_demand(layout::GRANULES)
        + 16
}

pub fn run_lifecycle(
    n: usize,
    seed: u64,
    mutations: &Mutations,
) -> Result<LifecycleReport, HarnessError> {
    run_lifecycle_in(n, seed, mutations, lifecycle_pool())
}

pub fn run_lifecycle_in(
    n: usize,
    seed: u64,
    mutations: &Mutations,
    pool: usize,
) -> Result<LifecycleReport, HarnessError> {
    if !(1..=MAX_CONTAINERS).contains(&n) {
        return Err(HarnessError::Validation(format!(
            "container count must be in 1..={MAX_CONTAINERS}, got {n}"
        )));
    }
    let mut config = WorldConfig::new(pool);
    config.mutations = mutations.clone();
    let mut world = World::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    world.mark(None, "setup");
    world.rsi_create_system_realm(SystemRealmConfig::default())?;
    let free_after_system = world.granules().free_count();

    let program = workload();
    let mut realms = Vec::new();
    let mut outcomes = Vec::new();
    for i in 0..n {
        let (image, hash) = image_for(&world, &program, &mut rng);
        let req = CreateRequest {
            image,
            granules: layout::GRANULES,
            entry: 0,
            stack_size: crate::granule::GRANULE_SIZE as u64,
            policy: Policy {
                sha256: Some(hash),
                max_shared_buffer: layout::BUFFER_SIZE,
            },
            shielded_console: false,
        };
        let id = world.next_realm_id();
        let r = bracket(&mut world, &mut ops, id, "create", |w| {
            w.handle_create_request(&req)
        })?;
        realms.push(r);
        outcomes.push(ContainerOutcome {
            name: format!("c{i}"),
            realm: Some(r),
            create_error: None,
            exit: None,
            observations: Vec::new(),
        });
    }
    for &r in &realms {
        let out = bracket(&mut world, &mut ops, r, "start", |w| w.drive(r))?;
        if out != DriveOutcome::Progress {
            world.note(format!("realm {} did not start cleanly: {out:?}", r.0));
        }
    }
    let mut roundtrip = true;
    let mut before = BTreeMap::new();
    for &r in &realms {
        before.insert(r, live_context(&world, r)?);
        bracket(&mut world, &mut ops, r, "pause", |w| w.pause_container(r))?;
    }
    for &r in &realms {
        bracket(&mut world, &mut ops, r, "unpause", |w| {
            w.unpause_container(r)
        })?;
        roundtrip &= live_context(&world, r)? == before[&r];
    }
    for &r in &realms {
        bracket(&mut world, &mut ops, r, "kill", |w| {
            w.kill_container(r, EXIT_KILLED)
        })?;
    }
    for (o, &r) in outcomes.iter_mut().zip(&realms) {
        let d = world.descriptor(r).expect("realm");
        o.exit = d.exited;
        o.observations = d.observations.clone();
    }
    for &r in &realms {
        bracket(&mut world, &mut ops, r, "remove", |w| w.destroy_realm(r))?;
    }
    world.mark(None, "reclaim");
    world.host_reclaim();
    world.mark(None, "done");
    let pool_reclaimed = world.granules().free_count() == free_after_system
        && realms.iter().all(|&r| {
            world
                .descriptor(r)
                .is_some_and(|d| d.state == RealmState::Destroyed)
        });

    let exec = Execution {
        seed,
        world,
        containers: outcomes,
        ops,
        turns: 0,
    };
    let metrics = Metrics::collect(&exec);
    let mut findings = audit::audit(&exec, &metrics);
    if !roundtrip {
        findings.push(Finding::new(
            "CONTEXT-ROUNDTRIP",
            "a context changed across pause/unpause",
        ));
    }
    let per_container = metrics.containers.iter().map(|c| c.ops.clone()).collect();
    Ok(LifecycleReport {
        containers: n,
        per_container,
        context_roundtrip: roundtrip,
        pool_reclaimed,
        findings,
        metrics,
    })
}

fn live_context(world: &World, r: RealmId) -> Result<crate::cpu::CpuContext, RmmError> {
    world
        .descriptor(r)
        .and_then(|d| d.live.clone())
        .ok_or(RmmError::NoSuchRealm(r))
}
