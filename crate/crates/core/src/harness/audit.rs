// SPDX-License-Identifier: Apache-2.0

//! Audits over a finished run: the world's own invariant failures plus
//! independent checks replayed from the raw trace.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::Serialize;

use crate::granule::{GranuleId, RealmId, WorldId};
use crate::rmm::World;
use crate::trace::{Event, GranuleOp, GranuleOutcome, Trace};

use super::metrics::Metrics;
use super::run::Execution;

/// One failed check, keyed by invariant name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub invariant: String,
    pub detail: String,
}

impl Finding {
    pub fn new(invariant: &str, detail: impl Into<String>) -> Self {
        Self {
            invariant: invariant.to_string(),
            detail: detail.into(),
        }
    }
}

/// Every audit applicable to a single run.
pub fn audit(exec: &Execution, metrics: &Metrics) -> Vec<Finding> {
    let w = &exec.world;
    let mut out: Vec<Finding> = w
        .failures()
        .iter()
        .map(|f| Finding::new(f.invariant, format!("step {}: {}", f.step, f.detail)))
        .collect();
    out.extend(
        w.ledger()
            .violations()
            .iter()
            .map(|v| Finding::new("MAINTENANCE-SUFFICIENCY", v.report_line())),
    );
    out.extend(trap_totality(w.trace()));
    out.extend(switch_discipline(w.trace()));
    out.extend(host_confinement(w.trace()));
    out.extend(released_memory_is_clean(w));
    out.extend(
        plaintext_leaks(w)
            .into_iter()
            .map(|d| Finding::new("SHIELDED-IO", d)),
    );
    let recount = Metrics::recount(exec);
    if &recount != metrics {
        out.push(Finding::new(
            "METRIC-CONSISTENCY",
            format!(
                "maintained {} differs from trace recount {}",
                serde_json::to_string(metrics).unwrap_or_default(),
                serde_json::to_string(&recount).unwrap_or_default()
            ),
        ));
    }
    out
}

/// Every trap is resolved by exactly one reentry, exit or destruction
/// before the same realm traps again.
pub fn trap_totality(trace: &Trace) -> Vec<Finding> {
    let mut out = Vec::new();
    let mut open: BTreeMap<RealmId, u64> = BTreeMap::new();
    for rec in trace.records() {
        match &rec.event {
            Event::Trap { realm, .. } => {
                if let Some(prev) = open.insert(*realm, rec.step) {
                    out.push(Finding::new(
                        "TRAP-TOTALITY",
                        format!(
                            "realm {} trapped at {} with step {prev} unresolved",
                            realm.0, rec.step
                        ),
                    ));
                }
            }
            Event::Reentry { realm, .. } | Event::Exit { realm, .. } => {
                open.remove(realm);
            }
            Event::Rsi {
                name: "destroy",
                realm,
                ..
            } => {
                open.remove(realm);
            }
            _ => {}
        }
    }
    for (realm, step) in open {
        out.push(Finding::new(
            "TRAP-TOTALITY",
            format!("realm {} trap at step {step} never resolved", realm.0),
        ));
    }
    out
}

const SERVICED: [&str; 4] = ["trap", "forward", "reply", "eret"];
const LOCAL: [&str; 2] = ["trap", "eret"];
const KILLED_BY_SYSTEM: [&str; 3] = ["trap", "forward", "kill"];

/// Domain switches happen only inside trap cycles, and each cycle follows
/// one of the legal shapes. A serviced syscall is exactly four switches.
pub fn switch_discipline(trace: &Trace) -> Vec<Finding> {
    let mut out = Vec::new();
    let mut subject: Option<RealmId> = None;
    let mut cycles: BTreeMap<RealmId, Vec<&'static str>> = BTreeMap::new();
    let bad = |realm: RealmId, step: u64, what: String| {
        Finding::new(
            "SWITCH-COUNT",
            format!("realm {} step {step}: {what}", realm.0),
        )
    };
    for rec in trace.records() {
        match &rec.event {
            Event::Mark { realm, .. } => subject = *realm,
            Event::Trap { realm, .. } => {
                cycles.insert(*realm, Vec::new());
            }
            Event::Switch { reason, .. } => {
                match subject.and_then(|r| cycles.get_mut(&r).map(|c| (r, c))) {
                    Some((_, c)) => c.push(reason),
                    None => out.push(Finding::new(
                        "SWITCH-COUNT",
                        format!(
                            "step {}: `{reason}` switch outside any trap cycle",
                            rec.step
                        ),
                    )),
                }
            }
            Event::Reentry { realm, .. } => {
                if let Some(c) = cycles.remove(realm) {
                    if c[..] != SERVICED[..] && c[..] != LOCAL[..] {
                        out.push(bad(
                            *realm,
                            rec.step,
                            format!("reentered after switches {c:?}"),
                        ));
                    }
                }
            }
            Event::Exit { realm, .. } => {
                if let Some(c) = cycles.remove(realm) {
                    let ok = c.len() <= 3
                        && (SERVICED.starts_with(&c) || KILLED_BY_SYSTEM.starts_with(&c));
                    if !ok {
                        out.push(bad(
                            *realm,
                            rec.step,
                            format!("stopped after switches {c:?}"),
                        ));
                    }
                }
            }
            Event::Rsi {
                name: "destroy",
                realm,
                ..
            } => {
                cycles.remove(realm);
            }
            _ => {}
        }
    }
    out
}

/// The host touched only memory it owns or that is shared with it.
/// Ownership is replayed from the trace alone.
pub fn host_confinement(trace: &Trace) -> Vec<Finding> {
    let mut owner: BTreeMap<GranuleId, WorldId> = BTreeMap::new();
    let mut shared: BTreeMap<GranuleId, Vec<WorldId>> = BTreeMap::new();
    let mut out = Vec::new();
    for rec in trace.records() {
        let Event::Granule {
            op,
            granule,
            accessor,
            outcome,
        } = &rec.event
        else {
            continue;
        };
        match (op, outcome) {
            (_, GranuleOutcome::Owner(w)) => {
                owner.insert(*granule, *w);
            }
            (_, GranuleOutcome::SharedWith(ws)) => {
                shared.insert(*granule, ws.clone());
            }
            (GranuleOp::Check(kind), GranuleOutcome::Allowed)
                if *accessor == WorldId::NormalWorld =>
            {
                let own = owner.get(granule).copied().unwrap_or(WorldId::NormalWorld);
                let with_host = shared
                    .get(granule)
                    .is_some_and(|s| s.contains(&WorldId::NormalWorld));
                if own != WorldId::NormalWorld && !with_host {
                    out.push(Finding::new(
                        "HOST-CONFINEMENT",
                        format!("step {}: host {kind} of {granule} owned by {own}", rec.step),
                    ));
                }
            }
            _ => {}
        }
    }
    out
}

/// Granules that were handed back to the host after realm use hold no data.
pub fn released_memory_is_clean(world: &World) -> Vec<Finding> {
    let gs = world.granules();
    world
        .ever_delegated()
        .iter()
        .filter_map(|&g| gs.get(g).ok())
        .filter(|gr| gr.owner == WorldId::NormalWorld && gr.contents().iter().any(|&b| b != 0))
        .map(|gr| {
            Finding::new(
                "TEMPORAL-ISOLATION",
                format!("{} returned to the host with residual data", gr.id),
            )
        })
        .collect()
}

/// Window used by the plaintext scan.
pub const SCAN_WINDOW: usize = 16;

fn distinctive(w: &[u8]) -> bool {
    let set: BTreeSet<u8> = w.iter().copied().collect();
    set.len() >= 6
}

/// Looks for any window of shielded plaintext in host-held stores.
pub fn plaintext_leaks(world: &World) -> Vec<String> {
    let Some(sys) = world.system() else {
        return Vec::new();
    };
    let mut needles: HashSet<[u8; SCAN_WINDOW]> = HashSet::new();
    for pt in sys.shielded_plaintext() {
        let mut i = 0;
        while i + SCAN_WINDOW <= pt.len() {
            let w: [u8; SCAN_WINDOW] = pt[i..i + SCAN_WINDOW].try_into().expect("window");
            if distinctive(&w) {
                needles.insert(w);
            }
            i += SCAN_WINDOW / 2;
        }
    }
    if needles.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (n, store) in world.host().host_stores().into_iter().enumerate() {
        if let Some(at) = store
            .windows(SCAN_WINDOW)
            .position(|w| needles.contains(<&[u8; SCAN_WINDOW]>::try_from(w).expect("window")))
        {
            out.push(format!(
                "host store #{n} holds shielded plaintext at offset {at}: {:?}",
                String::from_utf8_lossy(&store[at..at + SCAN_WINDOW])
            ));
        }
    }
    out
}

/// Scans every granule from the Normal World for `sentinel`. Returns
/// (granules readable by the host, granules containing the sentinel).
pub fn sentinel_sweep(world: &mut World, sentinel: &[u8]) -> (usize, usize) {
    let World { gs, trace, .. } = world;
    let mut readable = 0;
    let mut hits = 0;
    for i in 0..gs.pool_size() {
        let g = GranuleId(i as u32);
        if let Ok(bytes) = gs.read(
            WorldId::NormalWorld,
            g,
            0,
            crate::granule::GRANULE_SIZE,
            trace,
        ) {
            readable += 1;
            if bytes.windows(sentinel.len()).any(|w| w == sentinel) {
                hits += 1;
            }
        }
    }
    (readable, hits)
}
