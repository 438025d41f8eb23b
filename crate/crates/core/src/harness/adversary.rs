// SPDX-License-Identifier: Apache-2.0

//! Applying scripted host attacks and classifying what they achieved.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::granule::{AccessKind, AccessOutcome, GranuleId, RealmId, WorldId, GRANULE_SIZE};
use crate::host::{AdversaryAction, Effect, ReplyMutation, ScriptedAction, StoreTarget};
use crate::rmm::{Observation, World, EXIT_HOST_UNRESPONSIVE, EXIT_SECURITY_ABORT};

use super::audit::{plaintext_leaks, Finding};
use super::run::{ContainerOutcome, Execution};

/// Final classification of one adversary action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ActionOutcome {
    /// Refused by the protection check.
    Faulted,
    /// Noticed by the System Realm or the monitor; the tenant was stopped.
    Detected,
    /// No effect the tenant could observe beyond denial of service.
    Absorbed,
    SilentCorruption,
    PlaintextLeak,
}

impl ActionOutcome {
    pub fn forbidden(self) -> bool {
        matches!(
            self,
            ActionOutcome::SilentCorruption | ActionOutcome::PlaintextLeak
        )
    }
}

impl fmt::Display for ActionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionOutcome::Faulted => "faulted",
            ActionOutcome::Detected => "detected",
            ActionOutcome::Absorbed => "absorbed",
            ActionOutcome::SilentCorruption => "silent-corruption",
            ActionOutcome::PlaintextLeak => "plaintext-leak",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassifiedAction {
    pub index: usize,
    pub action: String,
    pub outcome: ActionOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AdversaryReport {
    pub actions: Vec<ClassifiedAction>,
    /// Whether every tenant's results equal, or are a stopped prefix of,
    /// the honest run.
    pub consistent: bool,
    pub leaks: Vec<String>,
}

impl AdversaryReport {
    pub fn forbidden(&self) -> impl Iterator<Item = &ClassifiedAction> {
        self.actions.iter().filter(|a| a.outcome.forbidden())
    }

    pub fn findings(&self) -> Vec<Finding> {
        self.forbidden()
            .map(|a| {
                Finding::new(
                    "ADVERSARY-TAXONOMY",
                    format!("#{} {} -> {}", a.index, a.action, a.outcome),
                )
            })
            .collect()
    }
}

/// Applies every step-time action that is due on the current host turn.
pub fn apply_step_actions(world: &mut World) {
    let due = world.host.due_step_actions();
    for (index, action) in due {
        let effect = match &action {
            AdversaryAction::ProbeGranule { granule, access } => probe(world, *granule, *access),
            AdversaryAction::InjectTrap { realm } => inject(world, RealmId(*realm)),
            _ => world.host.tamper_store(&action),
        };
        let World { host, trace, .. } = world;
        host.record(trace, index, action, effect);
    }
}

/// The host touches granules directly. Refusals are the expected result
/// for realm memory; success there is a breach.
fn probe(world: &mut World, granule: Option<u32>, access: AccessKind) -> Effect {
    let pool = world.gs.pool_size() as u32;
    let targets: Vec<GranuleId> = match granule {
        Some(g) if g < pool => vec![GranuleId(g)],
        Some(_) => return Effect::NoEffect,
        None => (0..pool).map(GranuleId).collect(),
    };
    let mut faulted = false;
    let mut breach = false;
    for g in targets {
        let Ok(gr) = world.gs.get(g) else { continue };
        let realm_private = gr.owner.is_realm() && !gr.shared_with.contains(&WorldId::NormalWorld);
        let World { gs, trace, .. } = world;
        let allowed = match access {
            AccessKind::Read => gs.read(WorldId::NormalWorld, g, 0, 64, trace).is_ok(),
            AccessKind::Write => {
                // Only write where the write would be refused anyway or is
                // harmless; the outcome check is what matters.
                if realm_private {
                    gs.write(WorldId::NormalWorld, g, 0, &[0xa5; 64], trace)
                        .is_ok()
                } else {
                    gs.check_access(WorldId::NormalWorld, g, AccessKind::Write, trace)
                        == AccessOutcome::Allowed
                }
            }
            AccessKind::Exec => {
                gs.check_access(WorldId::NormalWorld, g, AccessKind::Exec, trace)
                    == AccessOutcome::Allowed
            }
        };
        if allowed && realm_private {
            breach = true;
        } else if !allowed {
            faulted = true;
        }
    }
    if breach {
        Effect::Breach
    } else if faulted {
        Effect::Faulted
    } else {
        Effect::NoEffect
    }
}

/// The host tries to plant state in a realm: write its code page and
/// branch into it. Entry is only possible through the monitor.
fn inject(world: &mut World, realm: RealmId) -> Effect {
    let Some(g) = world
        .descriptor(realm)
        .filter(|d| d.state != crate::rmm::RealmState::Destroyed)
        .and_then(|d| d.private.first().copied())
    else {
        return Effect::NoEffect;
    };
    let World { gs, trace, .. } = world;
    let wrote = gs
        .write(WorldId::NormalWorld, g, 0, &[0xd4; 16], trace)
        .is_ok();
    let ran =
        gs.check_access(WorldId::NormalWorld, g, AccessKind::Exec, trace) == AccessOutcome::Allowed;
    if wrote || ran {
        Effect::Breach
    } else {
        Effect::Faulted
    }
}

fn is_prefix(short: &[Observation], long: &[Observation]) -> bool {
    short.len() <= long.len() && long[..short.len()] == *short
}

/// Container-visible results match the honest run, or stop early on a
/// defensive exit with everything seen so far matching.
pub fn consistent_with(run: &[ContainerOutcome], honest: &[ContainerOutcome]) -> bool {
    run.len() == honest.len()
        && run.iter().zip(honest).all(|(a, h)| {
            a.create_error == h.create_error
                && (a.observations == h.observations && a.exit == h.exit
                    || matches!(a.exit, Some(EXIT_SECURITY_ABORT | EXIT_HOST_UNRESPONSIVE))
                        && is_prefix(&a.observations, &h.observations))
        })
}

/// Classifies every scripted action of `exec` against an honest baseline.
pub fn classify(
    exec: &Execution,
    honest: Option<&Execution>,
    script: &[ScriptedAction],
) -> AdversaryReport {
    let w = &exec.world;
    let consistent = honest.is_none_or(|h| consistent_with(&exec.containers, &h.containers));
    let detections: Vec<u64> = w
        .system()
        .map(|s| s.detections().iter().map(|d| d.step).collect())
        .unwrap_or_default();
    let leaks = plaintext_leaks(w);
    let log = w.host().adversary_log();
    let mut actions = Vec::new();
    for (index, sa) in script.iter().enumerate() {
        let rec = log.iter().find(|r| r.index == index);
        let outcome = match rec.map(|r| (r.effect, r.step)) {
            None | Some((Effect::NoEffect, _)) => ActionOutcome::Absorbed,
            Some((Effect::Faulted, _)) => ActionOutcome::Faulted,
            Some((Effect::Breach, _)) => match sa.action {
                AdversaryAction::ProbeGranule {
                    access: AccessKind::Read,
                    ..
                } => ActionOutcome::PlaintextLeak,
                _ => ActionOutcome::SilentCorruption,
            },
            Some((Effect::Applied, step)) => {
                if !consistent {
                    ActionOutcome::SilentCorruption
                } else if detections.iter().any(|&d| d >= step) {
                    ActionOutcome::Detected
                } else {
                    ActionOutcome::Absorbed
                }
            }
        };
        actions.push(ClassifiedAction {
            index,
            action: sa.action.name(),
            outcome,
        });
    }
    if !leaks.is_empty() {
        actions.push(ClassifiedAction {
            index: script.len(),
            action: "store scan".into(),
            outcome: ActionOutcome::PlaintextLeak,
        });
    }
    if !consistent && !actions.iter().any(|a| a.outcome.forbidden()) {
        actions.push(ClassifiedAction {
            index: script.len(),
            action: "differential".into(),
            outcome: ActionOutcome::SilentCorruption,
        });
    }
    AdversaryReport {
        actions,
        consistent,
        leaks,
    }
}

/// A seeded attack script over the shielded stores of a scenario.
pub fn random_script(
    seed: u64,
    turns: u64,
    pool_size: usize,
    realms: &[u32],
    files: &[&str],
    targets: &[StoreTarget],
) -> Vec<ScriptedAction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=3);
    let mut out: Vec<ScriptedAction> = (0..count)
        .map(|_| {
            let target = targets.choose(&mut rng).expect("targets").clone();
            let action = match rng.gen_range(0..9) {
                0 => AdversaryAction::TamperReply {
                    mutation: *[
                        ReplyMutation::InflateOutLen,
                        ReplyMutation::RetvalMismatch,
                        ReplyMutation::OutOfBuffer,
                        ReplyMutation::ExceedBuffer,
                    ]
                    .choose(&mut rng)
                    .expect("mutations"),
                },
                1 => AdversaryAction::DropRequest,
                2 => AdversaryAction::ReplayBlock {
                    target,
                    index: rng.gen_range(0..3),
                },
                3 => AdversaryAction::ReorderBlocks { target },
                4 => AdversaryAction::FlipStoreBit {
                    target,
                    bit: rng.gen_range(0..(3 * GRANULE_SIZE as u64 * 8)),
                },
                5 => AdversaryAction::TruncateStore {
                    target,
                    keep: rng.gen_range(0..3 * GRANULE_SIZE as u64),
                },
                6 => {
                    let mut pair = files.to_vec();
                    pair.shuffle(&mut rng);
                    AdversaryAction::SpliceBlock {
                        from: pair[0].to_string(),
                        into: pair[pair.len() - 1].to_string(),
                        index: rng.gen_range(0..2),
                    }
                }
                7 => AdversaryAction::ProbeGranule {
                    granule: rng
                        .gen_bool(0.8)
                        .then(|| rng.gen_range(0..pool_size as u32)),
                    access: *[AccessKind::Read, AccessKind::Write, AccessKind::Exec]
                        .choose(&mut rng)
                        .expect("kinds"),
                },
                _ => AdversaryAction::InjectTrap {
                    realm: *realms.choose(&mut rng).expect("realms"),
                },
            };
            ScriptedAction {
                at_turn: rng.gen_range(0..turns.max(1)),
                action,
            }
        })
        .collect();
    out.sort_by_key(|a| a.at_turn);
    out
}
