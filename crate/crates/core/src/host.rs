// SPDX-License-Identifier: Apache-2.0

//! The untrusted Normal World: a small in-memory service OS and a scripted
//! adversary that owns it.
//!
//! Every byte the host exchanges with the realms travels through the System
//! Realm's bounce pages, read and written with Normal World permissions, so
//! each touch goes through the protection check and the coherence ledger.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::CoherenceLedger;
use crate::granule::{AccessKind, GranuleId, GranuleSpace, WorldId, GRANULE_SIZE};
use crate::shielded_io::{FileHeader, FILE_RECORD_LEN};
use crate::trace::{Event, Trace};

pub const O_CREAT: u64 = 0x40;
pub const O_TRUNC: u64 = 0x200;

/// Host-side errno values.
const ENOENT: i64 = 2;
const EBADF: i64 = 9;
const EAGAIN: i64 = 11;
const EACCES: i64 = 13;

/// First process id handed to container tenants; pid = base + realm id.
pub const PID_BASE: u32 = 1000;

/// A marshalled request. Payload bytes, when any, sit at offset 0 of the
/// bounce buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostCall {
    Open { path_len: u64, flags: u64 },
    Close { hfd: u64 },
    Pread { hfd: u64, offset: u64, len: u64 },
    Pwrite { hfd: u64, offset: u64, len: u64 },
    Stat { hfd: u64 },
    SockSend { hfd: u64, len: u64 },
    SockRecv { hfd: u64, len: u64 },
    ConsoleWrite { len: u64 },
    ClockRead,
}

impl fmt::Display for HostCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HostCall::Open { path_len, flags } => {
                write!(f, "open(len={path_len}, flags={flags:#x})")
            }
            HostCall::Close { hfd } => write!(f, "close({hfd})"),
            HostCall::Pread { hfd, offset, len } => {
                write!(f, "pread({hfd}, off={offset}, len={len})")
            }
            HostCall::Pwrite { hfd, offset, len } => {
                write!(f, "pwrite({hfd}, off={offset}, len={len})")
            }
            HostCall::Stat { hfd } => write!(f, "stat({hfd})"),
            HostCall::SockSend { hfd, len } => write!(f, "sock_send({hfd}, len={len})"),
            HostCall::SockRecv { hfd, len } => write!(f, "sock_recv({hfd}, len={len})"),
            HostCall::ConsoleWrite { len } => write!(f, "console_write(len={len})"),
            HostCall::ClockRead => f.write_str("clock_read()"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostRequest {
    pub pid: u32,
    pub call: HostCall,
}

/// What the host claims happened. Output bytes, when any, are at
/// `out_off` in the bounce buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostReply {
    pub retval: i64,
    pub out_len: u64,
    pub out_off: u64,
}

impl HostReply {
    fn ret(retval: i64) -> Self {
        Self {
            retval,
            out_len: 0,
            out_off: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum HostError {
    #[error("the host dropped the request")]
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyMutation {
    InflateOutLen,
    RetvalMismatch,
    OutOfBuffer,
    ExceedBuffer,
}

/// Host-held data the adversary can rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreTarget {
    File(String),
    Channel(String),
}

impl fmt::Display for StoreTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreTarget::File(p) => write!(f, "file:{p}"),
            StoreTarget::Channel(n) => write!(f, "channel:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversaryAction {
    /// Touch one granule, or every granule in the pool when `granule` is absent.
    ProbeGranule {
        #[serde(default)]
        granule: Option<u32>,
        access: AccessKind,
    },
    TamperReply {
        mutation: ReplyMutation,
    },
    DropRequest,
    ReplayBlock {
        target: StoreTarget,
        index: u32,
    },
    ReorderBlocks {
        target: StoreTarget,
    },
    InjectTrap {
        realm: u32,
    },
    FlipStoreBit {
        target: StoreTarget,
        bit: u64,
    },
    TruncateStore {
        target: StoreTarget,
        keep: u64,
    },
    SpliceBlock {
        from: String,
        into: String,
        index: u32,
    },
}

impl AdversaryAction {
    /// Actions that wait for the next request rather than a scheduler step.
    pub fn at_dispatch(&self) -> bool {
        matches!(
            self,
            AdversaryAction::TamperReply { .. } | AdversaryAction::DropRequest
        )
    }

    pub fn name(&self) -> String {
        match self {
            AdversaryAction::ProbeGranule {
                granule: Some(g),
                access,
            } => {
                format!("probe g{g} {access}")
            }
            AdversaryAction::ProbeGranule {
                granule: None,
                access,
            } => format!("probe all {access}"),
            AdversaryAction::TamperReply { mutation } => format!("tamper-reply {mutation:?}"),
            AdversaryAction::DropRequest => "drop-request".into(),
            AdversaryAction::ReplayBlock { target, index } => format!("replay {target} #{index}"),
            AdversaryAction::ReorderBlocks { target } => format!("reorder {target}"),
            AdversaryAction::InjectTrap { realm } => format!("inject-trap realm={realm}"),
            AdversaryAction::FlipStoreBit { target, bit } => format!("flip {target} bit={bit}"),
            AdversaryAction::TruncateStore { target, keep } => {
                format!("truncate {target} keep={keep}")
            }
            AdversaryAction::SpliceBlock { from, into, index } => {
                format!("splice {from} -> {into} #{index}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedAction {
    /// Earliest scheduler turn at which the action may fire.
    #[serde(default)]
    pub at_turn: u64,
    #[serde(flatten)]
    pub action: AdversaryAction,
}

/// Immediate effect of an action, before later detection is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    /// The hardware or monitor refused it.
    Faulted,
    /// Host-held data or a reply was changed.
    Applied,
    /// Nothing to act on.
    NoEffect,
    /// A probe reached memory it must never reach.
    Breach,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdversaryRecord {
    pub index: usize,
    pub action: AdversaryAction,
    pub step: u64,
    pub effect: Effect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum HostFd {
    File(String),
    Socket { name: String, end: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct SocketPair {
    /// Messages waiting to be received by end 0 and end 1.
    queues: [VecDeque<Vec<u8>>; 2],
    opened: usize,
    /// Every message ever sent, with the queue it went to.
    history: Vec<(usize, Vec<u8>)>,
}

/// The Trim OS.
#[derive(Debug, Clone, Default)]
pub struct TrimOs {
    files: BTreeMap<String, Vec<u8>>,
    hfds: BTreeMap<u64, HostFd>,
    next_hfd: u64,
    sockets: BTreeMap<String, SocketPair>,
    consoles: BTreeMap<u32, Vec<u8>>,
    clock: u64,
    /// Earlier contents of every overwritten record, keyed by (path, offset).
    overwritten: BTreeMap<(String, u64), Vec<Vec<u8>>>,
    script: VecDeque<(usize, ScriptedAction)>,
    turn: u64,
    log: Vec<AdversaryRecord>,
}

impl TrimOs {
    pub fn new() -> Self {
        Self {
            next_hfd: 3,
            ..Self::default()
        }
    }

    pub fn load_script(&mut self, actions: Vec<ScriptedAction>) {
        self.script = actions.into_iter().enumerate().collect();
    }

    pub fn set_turn(&mut self, turn: u64) {
        self.turn = turn;
    }

    pub fn adversary_log(&self) -> &[AdversaryRecord] {
        &self.log
    }

    /// Actions that never fired.
    pub fn pending_actions(&self) -> impl Iterator<Item = &(usize, ScriptedAction)> {
        self.script.iter()
    }

    pub fn file(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(Vec::as_slice)
    }

    pub fn files(&self) -> impl Iterator<Item = (&String, &Vec<u8>)> {
        self.files.iter()
    }

    pub fn file_mut(&mut self, path: &str) -> Option<&mut Vec<u8>> {
        self.files.get_mut(path)
    }

    pub fn console(&self, pid: u32) -> &[u8] {
        self.consoles.get(&pid).map_or(&[], Vec::as_slice)
    }

    pub fn consoles(&self) -> impl Iterator<Item = (&u32, &Vec<u8>)> {
        self.consoles.iter()
    }

    pub fn console_mut(&mut self, pid: u32) -> &mut Vec<u8> {
        self.consoles.entry(pid).or_default()
    }

    /// Every host-held byte string: files, socket traffic, consoles and
    /// overwritten records. Used by plaintext scans.
    pub fn host_stores(&self) -> Vec<&[u8]> {
        let mut out: Vec<&[u8]> = Vec::new();
        out.extend(self.files.values().map(Vec::as_slice));
        for s in self.sockets.values() {
            out.extend(s.history.iter().map(|(_, m)| m.as_slice()));
            for q in &s.queues {
                out.extend(q.iter().map(Vec::as_slice));
            }
        }
        out.extend(self.consoles.values().map(Vec::as_slice));
        for v in self.overwritten.values() {
            out.extend(v.iter().map(Vec::as_slice));
        }
        out
    }

    fn bounce_read(
        gs: &GranuleSpace,
        ledger: &mut CoherenceLedger,
        trace: &mut Trace,
        bounce: &[GranuleId],
        offset: u64,
        len: u64,
    ) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(len as usize);
        let mut at = offset as usize;
        let end = at.checked_add(len as usize)?;
        while at < end {
            let g = *bounce.get(at / GRANULE_SIZE)?;
            let off = at % GRANULE_SIZE;
            let n = (GRANULE_SIZE - off).min(end - at);
            let _ = ledger.check_read(WorldId::NormalWorld, g, off, n, "host-read", trace);
            out.extend(gs.read(WorldId::NormalWorld, g, off, n, trace).ok()?);
            at += n;
        }
        Some(out)
    }

    fn bounce_write(
        gs: &mut GranuleSpace,
        ledger: &mut CoherenceLedger,
        trace: &mut Trace,
        bounce: &[GranuleId],
        data: &[u8],
    ) -> u64 {
        let cap = (bounce.len() * GRANULE_SIZE).min(data.len());
        let mut at = 0usize;
        while at < cap {
            let g = bounce[at / GRANULE_SIZE];
            let off = at % GRANULE_SIZE;
            let n = (GRANULE_SIZE - off).min(cap - at);
            if gs
                .write(WorldId::NormalWorld, g, off, &data[at..at + n], trace)
                .is_err()
            {
                break;
            }
            ledger.record_write(WorldId::NormalWorld, g, off, n);
            at += n;
        }
        at as u64
    }

    /// Services one request. An armed dispatch-time adversary action is
    /// applied first.
    pub fn dispatch(
        &mut self,
        gs: &mut GranuleSpace,
        ledger: &mut CoherenceLedger,
        trace: &mut Trace,
        bounce: &[GranuleId],
        req: &HostRequest,
    ) -> Result<HostReply, HostError> {
        let armed = match self.script.front() {
            Some((_, a)) if a.action.at_dispatch() && a.at_turn <= self.turn => {
                self.script.pop_front()
            }
            _ => None,
        };
        if let Some((
            index,
            ScriptedAction {
                action: AdversaryAction::DropRequest,
                ..
            },
        )) = &armed
        {
            self.note(trace, *index, AdversaryAction::DropRequest, Effect::Applied);
            trace.emit(Event::Host {
                pid: req.pid,
                call: req.call.to_string(),
                outcome: "dropped".into(),
            });
            return Err(HostError::Dropped);
        }
        let mut reply = self.serve(gs, ledger, trace, bounce, req);
        if let Some((
            index,
            ScriptedAction {
                action: AdversaryAction::TamperReply { mutation },
                ..
            },
        )) = armed
        {
            match mutation {
                ReplyMutation::InflateOutLen => reply.out_len = reply.out_len * 2 + 4097,
                ReplyMutation::RetvalMismatch => {
                    reply.retval = if reply.retval >= 0 {
                        reply.retval + 1
                    } else {
                        7
                    }
                }
                ReplyMutation::OutOfBuffer => reply.out_off += 1 << 20,
                ReplyMutation::ExceedBuffer => reply.out_len = 1 << 20,
            }
            self.note(
                trace,
                index,
                AdversaryAction::TamperReply { mutation },
                Effect::Applied,
            );
        }
        trace.emit(Event::Host {
            pid: req.pid,
            call: req.call.to_string(),
            outcome: format!(
                "ret={} out={}+{}",
                reply.retval, reply.out_off, reply.out_len
            ),
        });
        Ok(reply)
    }

    fn serve(
        &mut self,
        gs: &mut GranuleSpace,
        ledger: &mut CoherenceLedger,
        trace: &mut Trace,
        bounce: &[GranuleId],
        req: &HostRequest,
    ) -> HostReply {
        macro_rules! read_in {
            ($len:expr) => {
                Self::bounce_read(gs, ledger, trace, bounce, 0, $len)
            };
        }
        match req.call {
            HostCall::Open { path_len, flags } => {
                let Some(raw) = read_in!(path_len) else {
                    return HostReply::ret(-EBADF);
                };
                let path = String::from_utf8_lossy(&raw).into_owned();
                if let Some(name) = path.strip_prefix("/chan/") {
                    let pair = self.sockets.entry(name.to_string()).or_default();
                    if pair.opened >= 2 {
                        return HostReply::ret(-EACCES);
                    }
                    let end = pair.opened;
                    pair.opened += 1;
                    return HostReply::ret(self.alloc(HostFd::Socket {
                        name: name.to_string(),
                        end,
                    }));
                }
                if !self.files.contains_key(&path) {
                    if flags & O_CREAT == 0 {
                        return HostReply::ret(-ENOENT);
                    }
                    self.files.insert(path.clone(), Vec::new());
                } else if flags & O_TRUNC != 0 {
                    self.files.insert(path.clone(), Vec::new());
                }
                HostReply::ret(self.alloc(HostFd::File(path)))
            }
            HostCall::Close { hfd } => match self.hfds.remove(&hfd) {
                Some(_) => HostReply::ret(0),
                None => HostReply::ret(-EBADF),
            },
            HostCall::Pread { hfd, offset, len } => {
                let Some(HostFd::File(path)) = self.hfds.get(&hfd) else {
                    return HostReply::ret(-EBADF);
                };
                let data = self.files.get(path).map_or(&[][..], Vec::as_slice);
                let start = (offset as usize).min(data.len());
                let end = (start + len as usize).min(data.len());
                let chunk = data[start..end].to_vec();
                let n = Self::bounce_write(gs, ledger, trace, bounce, &chunk);
                HostReply {
                    retval: n as i64,
                    out_len: n,
                    out_off: 0,
                }
            }
            HostCall::Pwrite { hfd, offset, len } => {
                let Some(HostFd::File(path)) = self.hfds.get(&hfd).cloned() else {
                    return HostReply::ret(-EBADF);
                };
                let Some(data) = read_in!(len) else {
                    return HostReply::ret(-EBADF);
                };
                let file = self.files.entry(path.clone()).or_default();
                let start = offset as usize;
                if file.len() < start + data.len() {
                    file.resize(start + data.len(), 0);
                }
                let old = file[start..start + data.len()].to_vec();
                if old.iter().any(|&b| b != 0) {
                    self.overwritten
                        .entry((path, offset))
                        .or_default()
                        .push(old);
                }
                file[start..start + data.len()].copy_from_slice(&data);
                HostReply::ret(data.len() as i64)
            }
            HostCall::Stat { hfd } => match self.hfds.get(&hfd) {
                Some(HostFd::File(path)) => {
                    HostReply::ret(self.files.get(path).map_or(0, |f| f.len() as i64))
                }
                _ => HostReply::ret(-EBADF),
            },
            HostCall::SockSend { hfd, len } => {
                let Some(HostFd::Socket { name, end }) = self.hfds.get(&hfd).cloned() else {
                    return HostReply::ret(-EBADF);
                };
                let Some(msg) = read_in!(len) else {
                    return HostReply::ret(-EBADF);
                };
                let pair = self.sockets.entry(name).or_default();
                pair.queues[1 - end].push_back(msg.clone());
                pair.history.push((1 - end, msg));
                HostReply::ret(len as i64)
            }
            HostCall::SockRecv { hfd, len } => {
                let Some(HostFd::Socket { name, end }) = self.hfds.get(&hfd).cloned() else {
                    return HostReply::ret(-EBADF);
                };
                let pair = self.sockets.entry(name).or_default();
                let Some(mut msg) = pair.queues[end].pop_front() else {
                    return HostReply::ret(-EAGAIN);
                };
                msg.truncate(len as usize);
                let n = Self::bounce_write(gs, ledger, trace, bounce, &msg);
                HostReply {
                    retval: n as i64,
                    out_len: n,
                    out_off: 0,
                }
            }
            HostCall::ConsoleWrite { len } => {
                let Some(data) = read_in!(len) else {
                    return HostReply::ret(-EBADF);
                };
                self.consoles
                    .entry(req.pid)
                    .or_default()
                    .extend_from_slice(&data);
                HostReply::ret(len as i64)
            }
            HostCall::ClockRead => {
                self.clock += 1000;
                HostReply::ret(self.clock as i64)
            }
        }
    }

    fn alloc(&mut self, fd: HostFd) -> i64 {
        let hfd = self.next_hfd;
        self.next_hfd += 1;
        self.hfds.insert(hfd, fd);
        hfd as i64
    }

    fn note(&mut self, trace: &mut Trace, index: usize, action: AdversaryAction, effect: Effect) {
        let step = trace.emit(Event::Adversary {
            index,
            action: action.name(),
            outcome: format!("{effect:?}").to_lowercase(),
        });
        self.log.push(AdversaryRecord {
            index,
            action,
            step,
            effect,
        });
    }

    /// Pops the step-time actions that are due. Dispatch-time actions at
    /// the head of the script hold back everything behind them.
    pub(crate) fn due_step_actions(&mut self) -> Vec<(usize, AdversaryAction)> {
        let mut out = Vec::new();
        while let Some((_, a)) = self.script.front() {
            if a.action.at_dispatch() || a.at_turn > self.turn {
                break;
            }
            let (i, a) = self.script.pop_front().expect("front exists");
            out.push((i, a.action));
        }
        out
    }

    pub(crate) fn record(
        &mut self,
        trace: &mut Trace,
        index: usize,
        action: AdversaryAction,
        effect: Effect,
    ) {
        self.note(trace, index, action, effect);
    }

    /// Applies a store-tampering action to host-held data.
    pub(crate) fn tamper_store(&mut self, action: &AdversaryAction) -> Effect {
        match action {
            AdversaryAction::FlipStoreBit { target, bit } => match target {
                StoreTarget::File(p) => match self.files.get_mut(p) {
                    Some(f) if !f.is_empty() => {
                        let byte = (*bit / 8) as usize % f.len();
                        f[byte] ^= 1 << (bit % 8);
                        Effect::Applied
                    }
                    _ => Effect::NoEffect,
                },
                StoreTarget::Channel(n) => match self.first_queued(n) {
                    Some(m) if !m.is_empty() => {
                        let byte = (*bit / 8) as usize % m.len();
                        m[byte] ^= 1 << (bit % 8);
                        Effect::Applied
                    }
                    _ => Effect::NoEffect,
                },
            },
            AdversaryAction::TruncateStore { target, keep } => match target {
                StoreTarget::File(p) => match self.files.get_mut(p) {
                    Some(f) if (*keep as usize) < f.len() => {
                        f.truncate(*keep as usize);
                        Effect::Applied
                    }
                    _ => Effect::NoEffect,
                },
                StoreTarget::Channel(n) => match self.first_queued(n) {
                    Some(m) if (*keep as usize) < m.len() => {
                        m.truncate(*keep as usize);
                        Effect::Applied
                    }
                    _ => Effect::NoEffect,
                },
            },
            AdversaryAction::ReplayBlock { target, index } => match target {
                StoreTarget::File(p) => {
                    let off = FileHeader::record_offset(*index);
                    let old = self
                        .overwritten
                        .get(&(p.clone(), off))
                        .and_then(|v| v.first())
                        .cloned();
                    match (old, self.files.get_mut(p)) {
                        (Some(old), Some(f)) if f.len() >= off as usize + old.len() => {
                            f[off as usize..off as usize + old.len()].copy_from_slice(&old);
                            Effect::Applied
                        }
                        _ => Effect::NoEffect,
                    }
                }
                StoreTarget::Channel(n) => match self.sockets.get_mut(n) {
                    Some(pair) if !pair.history.is_empty() => {
                        let (q, m) = pair.history[*index as usize % pair.history.len()].clone();
                        pair.queues[q].push_front(m);
                        Effect::Applied
                    }
                    _ => Effect::NoEffect,
                },
            },
            AdversaryAction::ReorderBlocks { target } => match target {
                StoreTarget::File(p) => match self.files.get_mut(p) {
                    Some(f) if f.len() >= FileHeader::record_offset(2) as usize => {
                        let a = FileHeader::record_offset(0) as usize;
                        let b = FileHeader::record_offset(1) as usize;
                        let first = f[a..b].to_vec();
                        f.copy_within(b..b + FILE_RECORD_LEN, a);
                        f[b..b + FILE_RECORD_LEN].copy_from_slice(&first);
                        Effect::Applied
                    }
                    _ => Effect::NoEffect,
                },
                StoreTarget::Channel(n) => match self.sockets.get_mut(n) {
                    Some(pair) => {
                        for q in pair.queues.iter_mut() {
                            if q.len() >= 2 {
                                q.swap(0, 1);
                                return Effect::Applied;
                            }
                        }
                        Effect::NoEffect
                    }
                    None => Effect::NoEffect,
                },
            },
            AdversaryAction::SpliceBlock { from, into, index } => {
                let off = FileHeader::record_offset(*index) as usize;
                let src = self
                    .files
                    .get(from)
                    .and_then(|f| f.get(off..off + FILE_RECORD_LEN))
                    .map(<[u8]>::to_vec);
                match (src, self.files.get_mut(into)) {
                    (Some(rec), Some(f)) if f.len() >= off + FILE_RECORD_LEN && from != into => {
                        f[off..off + FILE_RECORD_LEN].copy_from_slice(&rec);
                        Effect::Applied
                    }
                    _ => Effect::NoEffect,
                }
            }
            _ => Effect::NoEffect,
        }
    }

    fn first_queued(&mut self, name: &str) -> Option<&mut Vec<u8>> {
        let pair = self.sockets.get_mut(name)?;
        let [q0, q1] = &mut pair.queues;
        q0.front_mut().or(q1.front_mut())
    }
}
