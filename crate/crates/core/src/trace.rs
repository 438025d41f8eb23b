// SPDX-License-Identifier: Apache-2.0

//! Line-oriented event trace shared by every component of the world.
//!
//! Each event gets a monotonically increasing step number. The textual form
//! of the trace is the determinism contract: two runs of the same scenario
//! with the same seed must render byte-identical traces.

use std::fmt;

use crate::coherence::{MaintOp, Violation};
use crate::granule::{AccessKind, GranuleId, RealmId, WorldId};
use crate::rtt::{Ipa, Stage2Fault};

/// Execution domain as seen by the domain-switch accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Container(RealmId),
    Rmm,
    SystemRealm,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Container(id) => write!(f, "container:{}", id.0),
            Domain::Rmm => f.write_str("rmm"),
            Domain::SystemRealm => f.write_str("system"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GranuleOp {
    Delegate,
    Undelegate,
    Transfer,
    Share,
    Unshare,
    Check(AccessKind),
}

impl fmt::Display for GranuleOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GranuleOp::Delegate => f.write_str("delegate"),
            GranuleOp::Undelegate => f.write_str("undelegate"),
            GranuleOp::Transfer => f.write_str("transfer"),
            GranuleOp::Share => f.write_str("share"),
            GranuleOp::Unshare => f.write_str("unshare"),
            GranuleOp::Check(kind) => write!(f, "check.{kind}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GranuleOutcome {
    /// Ownership now belongs to the given world.
    Owner(WorldId),
    /// Sharing set after the operation.
    SharedWith(Vec<WorldId>),
    Allowed,
    GptFault,
    Error(&'static str),
}

impl fmt::Display for GranuleOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GranuleOutcome::Owner(w) => write!(f, "owner={w}"),
            GranuleOutcome::SharedWith(ws) => {
                f.write_str("shared=[")?;
                for (i, w) in ws.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{w}")?;
                }
                f.write_str("]")
            }
            GranuleOutcome::Allowed => f.write_str("allowed"),
            GranuleOutcome::GptFault => f.write_str("gpt-fault"),
            GranuleOutcome::Error(e) => write!(f, "error:{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Granule {
        op: GranuleOp,
        granule: GranuleId,
        accessor: WorldId,
        outcome: GranuleOutcome,
    },
    Stage2Fault {
        realm: WorldId,
        ipa: Ipa,
        kind: AccessKind,
        reason: Stage2Fault,
    },
    Rsi {
        name: &'static str,
        realm: RealmId,
        detail: String,
        outcome: String,
    },
    Switch {
        from: Domain,
        to: Domain,
        reason: &'static str,
    },
    Trap {
        realm: RealmId,
        cause: String,
    },
    Reentry {
        realm: RealmId,
        pc: Ipa,
    },
    Exit {
        realm: RealmId,
        code: i64,
    },
    Maint {
        op: MaintOp,
        by: WorldId,
        site: &'static str,
    },
    Violation(Violation),
    Host {
        pid: u32,
        call: String,
        outcome: String,
    },
    Adversary {
        index: usize,
        action: String,
        outcome: String,
    },
    Harness {
        what: String,
    },
    /// Attribution marker: events until the next marker belong to `realm`.
    Mark {
        realm: Option<RealmId>,
        label: &'static str,
    },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Granule {
                op,
                granule,
                accessor,
                outcome,
            } => write!(f, "{op} {granule} {accessor} {outcome}"),
            Event::Stage2Fault {
                realm,
                ipa,
                kind,
                reason,
            } => write!(f, "s2fault {realm} ipa={ipa} {kind} {reason}"),
            Event::Rsi {
                name,
                realm,
                detail,
                outcome,
            } => {
                if detail.is_empty() {
                    write!(f, "rsi.{name}(realm={}) -> {outcome}", realm.0)
                } else {
                    write!(f, "rsi.{name}(realm={}, {detail}) -> {outcome}", realm.0)
                }
            }
            Event::Switch { from, to, reason } => write!(f, "switch {from} -> {to} ({reason})"),
            Event::Trap { realm, cause } => write!(f, "trap realm={} {cause}", realm.0),
            Event::Reentry { realm, pc } => write!(f, "reentry realm={} pc={pc}", realm.0),
            Event::Exit { realm, code } => write!(f, "exit realm={} code={code}", realm.0),
            Event::Maint { op, by, site } => write!(f, "maint {op} by={by} site={site}"),
            Event::Violation(v) => write!(f, "violation {v}"),
            Event::Host { pid, call, outcome } => write!(f, "host pid={pid} {call} -> {outcome}"),
            Event::Adversary {
                index,
                action,
                outcome,
            } => write!(f, "adversary#{index} {action} -> {outcome}"),
            Event::Harness { what } => write!(f, "harness {what}"),
            Event::Mark {
                realm: Some(r),
                label,
            } => write!(f, "mark container:{} {label}", r.0),
            Event::Mark { realm: None, label } => write!(f, "mark world {label}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub step: u64,
    pub event: Event,
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:06} {}", self.step, self.event)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Trace {
    next_step: u64,
    records: Vec<Record>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `event` and returns the step it was recorded at.
    pub fn emit(&mut self, event: Event) -> u64 {
        let step = self.next_step;
        self.next_step += 1;
        self.records.push(Record { step, event });
        step
    }

    /// Step number the next event will receive.
    pub fn step(&self) -> u64 {
        self.next_step
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn since(&self, step: u64) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.step >= step)
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 48);
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}
