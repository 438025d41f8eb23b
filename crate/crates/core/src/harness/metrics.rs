// SPDX-License-Identifier: Apache-2.0

//! Per-container metrics, and an independent recount from the raw trace.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::granule::{RealmId, WorldId};
use crate::trace::Event;

use super::run::{Execution, LIFECYCLE_OPS};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ContainerMetrics {
    pub name: String,
    pub realm: u32,
    pub switches: u64,
    pub syscall_traps: u64,
    pub abort_traps: u64,
    pub irq_traps: u64,
    pub maintenance: u64,
    pub faults: u64,
    /// Trace steps spent in each bracketed lifecycle operation.
    pub ops: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Metrics {
    pub containers: Vec<ContainerMetrics>,
    pub violations: usize,
    pub trace_events: usize,
}

impl Metrics {
    fn skeleton(exec: &Execution) -> Self {
        let containers = exec
            .containers
            .iter()
            .filter_map(|c| {
                c.realm.map(|r| ContainerMetrics {
                    name: c.name.clone(),
                    realm: r.0,
                    ..Default::default()
                })
            })
            .collect();
        Self {
            containers,
            violations: exec.world.ledger().violations().len(),
            trace_events: exec.world.trace().len(),
        }
    }

    fn slot(&mut self, realm: RealmId) -> Option<&mut ContainerMetrics> {
        self.containers.iter_mut().find(|c| c.realm == realm.0)
    }

    /// Metrics as maintained by the world while it ran.
    pub fn collect(exec: &Execution) -> Self {
        let mut m = Self::skeleton(exec);
        for (realm, c) in exec.world.counters() {
            if let Some(slot) = m.slot(*realm) {
                slot.switches = c.switches;
                slot.syscall_traps = c.syscall_traps;
                slot.abort_traps = c.abort_traps;
                slot.irq_traps = c.irq_traps;
                slot.maintenance = c.maintenance;
                slot.faults = c.faults;
            }
        }
        for op in &exec.ops {
            if let Some(slot) = m.slot(op.realm) {
                *slot.ops.entry(op.op.to_string()).or_default() += op.steps;
            }
        }
        m
    }

    /// The same metrics derived only from the rendered trace records.
    pub fn recount(exec: &Execution) -> Self {
        let mut m = Self::skeleton(exec);
        let mut subject: Option<RealmId> = None;
        let mut open: Option<(RealmId, &'static str, u64)> = None;
        for rec in exec.world.trace().records() {
            if let Event::Mark { realm, label } = &rec.event {
                if let Some((r, op, n)) = open.take() {
                    if let Some(slot) = m.slot(r) {
                        *slot.ops.entry(op.to_string()).or_default() += n;
                    }
                }
                subject = *realm;
                if let (Some(r), true) = (realm, LIFECYCLE_OPS.contains(label)) {
                    open = Some((*r, label, 0));
                }
                continue;
            }
            if let Some((_, _, n)) = open.as_mut() {
                *n += 1;
            }
            let Some(slot) = subject.and_then(|r| m.slot(r)) else {
                continue;
            };
            match &rec.event {
                Event::Switch { .. } => slot.switches += 1,
                Event::Trap { cause, .. } => match cause.split(' ').next() {
                    Some("syscall") => slot.syscall_traps += 1,
                    Some("abort") => slot.abort_traps += 1,
                    Some("irq") => slot.irq_traps += 1,
                    _ => {}
                },
                Event::Maint { .. } => slot.maintenance += 1,
                Event::Stage2Fault {
                    realm: WorldId::ContainerRealm(_),
                    ..
                } => slot.faults += 1,
                _ => {}
            }
        }
        if let Some((r, op, n)) = open {
            if let Some(slot) = m.slot(r) {
                *slot.ops.entry(op.to_string()).or_default() += n;
            }
        }
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}
