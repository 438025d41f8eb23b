// SPDX-License-Identifier: Apache-2.0

//! Builds a world from a scenario and drives it to completion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::cpu::encode_program;
use crate::granule::{RealmId, WorldId, GRANULE_SIZE};
use crate::host::ScriptedAction;
use crate::image::EncryptedImage;
use crate::rmm::{
    DriveOutcome, Mutations, Observation, SystemRealmConfig, World, WorldConfig,
    EXIT_HOST_UNRESPONSIVE, EXIT_KILLED,
};
use crate::system_realm::{ChannelSpec, CreateRequest, Policy};

use super::adversary::{self, AdversaryReport};
use super::audit::{self, Finding};
use super::metrics::Metrics;
use super::scenario::{pattern, Scenario};
use super::HarnessError;

/// Rounds without any progress before the remaining containers are stopped.
pub const STALL_ROUNDS: u32 = 8;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    /// Added to the scenario's own mutation list.
    pub mutations: Mutations,
    /// Replaces the scenario's adversary script.
    pub script: Option<Vec<ScriptedAction>>,
    /// Skip the honest baseline run used to classify adversary actions.
    pub no_differential: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerOutcome {
    pub name: String,
    pub realm: Option<RealmId>,
    pub create_error: Option<String>,
    pub exit: Option<i64>,
    pub observations: Vec<Observation>,
}

/// Step count of one bracketed lifecycle operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpSpan {
    pub realm: RealmId,
    pub op: &'static str,
    pub steps: u64,
}

/// Labels of the bracketed lifecycle operations, in lifecycle order.
pub const LIFECYCLE_OPS: [&str; 6] = ["create", "start", "pause", "unpause", "kill", "remove"];

/// A finished run: the world as it was left and what each container saw.
#[derive(Debug, Clone)]
pub struct Execution {
    pub seed: u64,
    pub world: World,
    pub containers: Vec<ContainerOutcome>,
    pub ops: Vec<OpSpan>,
    pub turns: u64,
}

/// Runs `f` as a bracketed lifecycle operation attributed to `realm`.
pub(crate) fn bracket<T>(
    world: &mut World,
    ops: &mut Vec<OpSpan>,
    realm: RealmId,
    op: &'static str,
    f: impl FnOnce(&mut World) -> T,
) -> T {
    world.mark(Some(realm), op);
    let start = world.trace().step();
    let out = f(world);
    let steps = world.trace().step() - start;
    world.mark(None, "idle");
    ops.push(OpSpan { realm, op, steps });
    out
}

/// The host writes over every granule it owns, leaving dirty lines behind.
fn scribble(world: &mut World, seed: u64) {
    let fill = pattern(&format!("host{seed}"), GRANULE_SIZE);
    let World {
        gs, ledger, trace, ..
    } = world;
    let ids: Vec<_> = gs
        .iter()
        .filter(|g| g.owner == WorldId::NormalWorld)
        .map(|g| g.id)
        .collect();
    for g in ids {
        if gs.write(WorldId::NormalWorld, g, 0, &fill, trace).is_ok() {
            ledger.record_write(WorldId::NormalWorld, g, 0, GRANULE_SIZE);
        }
    }
}

pub fn image_for(
    world: &World,
    program: &[crate::cpu::Instr],
    rng: &mut ChaCha8Rng,
) -> (EncryptedImage, [u8; 32]) {
    let plaintext = encode_program(program);
    let hash: [u8; 32] = Sha256::digest(&plaintext).into();
    let nonce: [u8; 12] = rng.gen();
    (
        EncryptedImage::seal(world.provisioning_key(), &plaintext, nonce),
        hash,
    )
}

/// A world with the System Realm and every container created, before any
/// container has run.
pub struct Prepared {
    pub world: World,
    pub containers: Vec<ContainerOutcome>,
    pub ops: Vec<OpSpan>,
    rng: ChaCha8Rng,
}

/// Builds the world for `sc` and creates its realms and channels.
pub fn prepare(sc: &Scenario, seed: u64, extra: &Mutations) -> Result<Prepared, HarnessError> {
    sc.validate()?;
    let mutations: Mutations = sc.mutation_set()?.iter().chain(extra.iter()).collect();
    let mut config = WorldConfig::new(sc.pool_size);
    config.mutations = mutations;
    let mut world = World::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();

    world.mark(None, "setup");
    world.note(format!("scenario {} seed={seed}", sc.name));
    if sc.host_scribble {
        scribble(&mut world, seed);
    }
    world.rsi_create_system_realm(SystemRealmConfig {
        granules: sc.system_granules,
    })?;

    let mut outcomes = Vec::new();
    for c in &sc.containers {
        let (image, hash) = image_for(&world, &c.program, &mut rng);
        let req = CreateRequest {
            image,
            granules: c.granules,
            entry: c.entry,
            stack_size: c.stack_size,
            policy: Policy {
                sha256: c.pin_measurement.then_some(hash),
                max_shared_buffer: c.max_shared_buffer,
            },
            shielded_console: c.shielded_console,
        };
        let id = world.next_realm_id();
        let res = bracket(&mut world, &mut ops, id, "create", |w| {
            w.handle_create_request(&req)
        });
        outcomes.push(ContainerOutcome {
            name: c.name.clone(),
            realm: res.as_ref().ok().copied(),
            create_error: res.err().map(|e| e.to_string()),
            exit: None,
            observations: Vec::new(),
        });
    }
    let realm_of = |name: &str| sc.container_index(name).and_then(|i| outcomes[i].realm);
    for ch in &sc.channels {
        if let (Some(a), Some(b)) = (realm_of(&ch.a), realm_of(&ch.b)) {
            world.register_channel(ChannelSpec {
                name: ch.name.clone(),
                a,
                b,
                shielded: ch.shielded,
            })?;
        }
    }
    Ok(Prepared {
        world,
        containers: outcomes,
        ops,
        rng,
    })
}

/// Translation-tree dump of `realm` once the scenario's realms exist.
pub fn dump_rtt(sc: &Scenario, seed: u64, realm: u32) -> Result<String, HarnessError> {
    let p = prepare(sc, seed, &Mutations::none())?;
    p.world
        .descriptor(RealmId(realm))
        .and_then(|d| d.rtt.as_ref())
        .map(|t| t.dump())
        .ok_or_else(|| {
            HarnessError::Validation(format!("scenario {} has no realm {realm}", sc.name))
        })
}

/// Executes `sc` once without audits.
pub fn execute(
    sc: &Scenario,
    seed: u64,
    extra: &Mutations,
    script: Vec<ScriptedAction>,
) -> Result<Execution, HarnessError> {
    let Prepared {
        mut world,
        containers: mut outcomes,
        mut ops,
        mut rng,
    } = prepare(sc, seed, extra)?;
    world.host_mut().load_script(script);

    let realms: Vec<RealmId> = outcomes.iter().filter_map(|o| o.realm).collect();
    let n = realms.len();
    let offset = if n > 0 { rng.gen_range(0..n) } else { 0 };
    let mut turn = 0u64;
    let mut idle_rounds = 0u32;
    let live = |w: &World, r: RealmId| w.descriptor(r).is_some_and(|d| d.is_live());
    while turn < sc.max_turns {
        if !realms.iter().any(|&r| live(&world, r)) {
            break;
        }
        world.mark(None, "turn");
        world.host_mut().set_turn(turn);
        adversary::apply_step_actions(&mut world);
        let mut progress = false;
        for k in 0..n {
            let realm = realms[(offset + k) % n];
            if !live(&world, realm) {
                continue;
            }
            world.mark(Some(realm), "run");
            for _ in 0..sc.quantum {
                match world.drive(realm) {
                    Ok(DriveOutcome::Progress) => progress = true,
                    Ok(DriveOutcome::Exited(_) | DriveOutcome::Killed(_)) => {
                        progress = true;
                        break;
                    }
                    Ok(DriveOutcome::Deferred | DriveOutcome::Idle) => break,
                    Err(e) => {
                        world.note(format!("realm {} drive error: {e}", realm.0));
                        world.kill_container(realm, EXIT_KILLED)?;
                        progress = true;
                        break;
                    }
                }
            }
        }
        turn += 1;
        if progress {
            idle_rounds = 0;
        } else {
            idle_rounds += 1;
            if idle_rounds >= STALL_ROUNDS {
                stop_all(&mut world, &realms, EXIT_HOST_UNRESPONSIVE, "stalled")?;
                break;
            }
        }
    }
    stop_all(&mut world, &realms, EXIT_KILLED, "turn budget exhausted")?;
    world.mark(None, "late");
    world.host_mut().set_turn(u64::MAX);
    adversary::apply_step_actions(&mut world);
    world.verify_shielded_stores();

    for o in outcomes.iter_mut() {
        if let Some(r) = o.realm {
            let d = world.descriptor(r).expect("created realm");
            o.exit = d.exited;
            o.observations = d.observations.clone();
        }
    }
    for &r in &realms {
        bracket(&mut world, &mut ops, r, "remove", |w| w.destroy_realm(r))?;
    }
    world.mark(None, "reclaim");
    world.host_reclaim();
    world.mark(None, "done");
    Ok(Execution {
        seed,
        world,
        containers: outcomes,
        ops,
        turns: turn,
    })
}

fn stop_all(
    world: &mut World,
    realms: &[RealmId],
    code: i64,
    why: &str,
) -> Result<(), HarnessError> {
    for &r in realms {
        if world.descriptor(r).is_some_and(|d| d.is_live()) {
            world.mark(Some(r), "stop");
            world.note(format!("realm {} stopped: {why}", r.0));
            world.kill_container(r, code)?;
        }
    }
    world.mark(None, "idle");
    Ok(())
}

/// Everything a `run` reports.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub execution: Execution,
    pub metrics: Metrics,
    pub findings: Vec<Finding>,
    pub adversary: Option<AdversaryReport>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn trace_text(&self) -> String {
        self.execution.world.trace().render()
    }

    /// Human-readable result lines.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let w = &self.execution.world;
        out.push_str(&format!(
            "scenario {} seed={} turns={} events={}\n",
            self.scenario,
            self.execution.seed,
            self.execution.turns,
            w.trace().len()
        ));
        for c in &self.execution.containers {
            match (&c.create_error, c.exit) {
                (Some(e), _) => {
                    out.push_str(&format!("container {}: create failed: {e}\n", c.name))
                }
                (None, code) => out.push_str(&format!(
                    "container {} realm={} exit={}\n",
                    c.name,
                    c.realm.map_or(0, |r| r.0),
                    code.map_or("none".to_string(), |c| c.to_string())
                )),
            }
        }
        for v in w.ledger().violations() {
            out.push_str(&format!("violation {}\n", v.report_line()));
        }
        if let Some(adv) = &self.adversary {
            for a in &adv.actions {
                out.push_str(&format!(
                    "adversary #{} {} -> {}\n",
                    a.index, a.action, a.outcome
                ));
            }
        }
        for f in &self.findings {
            out.push_str(&format!("FAIL {}: {}\n", f.invariant, f.detail));
        }
        out.push_str(if self.passed() {
            "result: pass\n"
        } else {
            "result: fail\n"
        });
        out
    }
}

/// Runs a scenario with audits, metrics and, when the scenario has an
/// adversary, a differential comparison against an honest run.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    let seed = opts.seed.unwrap_or(sc.seed);
    let script = opts.script.clone().unwrap_or_else(|| sc.adversary.clone());
    let exec = execute(sc, seed, &opts.mutations, script.clone())?;
    let metrics = Metrics::collect(&exec);
    let mut findings = audit::audit(&exec, &metrics);
    let adversary = if script.is_empty() {
        None
    } else {
        let baseline = if opts.no_differential {
            None
        } else {
            Some(execute(sc, seed, &opts.mutations, Vec::new())?)
        };
        let report = adversary::classify(&exec, baseline.as_ref(), &script);
        findings.extend(report.findings());
        Some(report)
    };
    Ok(RunReport {
        scenario: sc.name.clone(),
        execution: exec,
        metrics,
        findings,
        adversary,
    })
}
