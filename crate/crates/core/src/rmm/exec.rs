// SPDX-License-Identifier: Apache-2.0

//! Container execution: entry, trap capture, argument redirection,
//! forwarding to the System Realm and controlled reentry.

use std::fmt;

use crate::coherence::MaintenanceSite;
use crate::cpu::{
    Arg, BufferKind, CallClass, CpuContext, Direction, Instr, Sysno, INSTR_BYTES, RESULT_REG,
    SYSNO_REG,
};
use crate::granule::{RealmId, WorldId};
use crate::rtt::Ipa;
use crate::system_realm::{errno, verify_result, ServiceOutcome, Verdict};
use crate::trace::{Domain, Event};

use super::{
    domain_of, Flag, MemFault, Observation, RealmState, RmmError, SharedBufferRecord, World,
    EXIT_SECURITY_ABORT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortClass {
    Data,
    Instruction,
}

/// Reduced exception syndrome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyndromeInfo {
    pub class: AbortClass,
    pub write_not_read: bool,
    pub access_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrapCause {
    Syscall { number: Sysno, args: [u64; 6] },
    DataAbort { esr: SyndromeInfo, far: Ipa },
    Irq { line: u32 },
}

impl TrapCause {
    pub fn kind(&self) -> &'static str {
        match self {
            TrapCause::Syscall { .. } => "syscall",
            TrapCause::DataAbort { .. } => "abort",
            TrapCause::Irq { .. } => "irq",
        }
    }
}

impl fmt::Display for TrapCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrapCause::Syscall { number, args } => write!(
                f,
                "syscall {number}({:#x},{:#x},{:#x})",
                args[0], args[1], args[2]
            ),
            TrapCause::DataAbort { esr, far } => write!(
                f,
                "abort {} far={far} {} size={}",
                match esr.class {
                    AbortClass::Data => "data",
                    AbortClass::Instruction => "instruction",
                },
                if esr.write_not_read { "write" } else { "read" },
                esr.access_size
            ),
            TrapCause::Irq { line } => write!(f, "irq line={line}"),
        }
    }
}

/// A captured exception awaiting service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingTrap {
    pub realm: RealmId,
    pub cause: TrapCause,
    /// Trace step of the trap event.
    pub step: u64,
}

/// A private range whose contents were staged through the Data buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Redirect {
    pub private: Ipa,
    pub len: u64,
    pub dir: Direction,
}

/// What the System Realm receives for one trap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardedRequest {
    pub realm: RealmId,
    /// The cause with pointer arguments rewritten.
    pub cause: TrapCause,
    pub original: TrapCause,
    pub redirected: Option<Redirect>,
    /// The Data buffer at forwarding time, if any.
    pub buffer: Option<SharedBufferRecord>,
}

impl ForwardedRequest {
    pub fn sysno(&self) -> Option<Sysno> {
        match self.cause {
            TrapCause::Syscall { number, .. } => Some(number),
            _ => None,
        }
    }

    pub fn args(&self) -> [u64; 6] {
        match self.cause {
            TrapCause::Syscall { args, .. } => args,
            _ => [0; 6],
        }
    }

    /// Pointer and length of the call's buffer argument.
    pub fn pointer(&self) -> Option<(Ipa, u64, Direction)> {
        let number = self.sysno()?;
        let p = number.pointer_arg()?;
        let args = self.args();
        Some((Ipa(args[p.ptr]), args[p.len], p.dir))
    }

    /// Bytes the container asked to receive.
    pub fn request_len(&self) -> u64 {
        match (self.sysno().map(Sysno::class), self.pointer()) {
            (Some(CallClass::ReadLike), Some((_, len, _))) => len,
            _ => 0,
        }
    }

    /// Bytes the container handed over for a write-like call.
    pub fn write_len(&self) -> u64 {
        match (self.sysno().map(Sysno::class), self.pointer()) {
            (Some(CallClass::WriteLike), Some((_, len, _))) => len,
            _ => 0,
        }
    }
}

/// Result of a serviced syscall as delivered toward the container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyscallReply {
    pub retval: i64,
    /// Bytes placed in the Data buffer.
    pub out_len: u64,
    /// Where those bytes start.
    pub out_ptr: Option<Ipa>,
    pub errno: i64,
}

impl SyscallReply {
    pub fn ok(retval: i64) -> Self {
        Self {
            retval,
            out_len: 0,
            out_ptr: None,
            errno: 0,
        }
    }

    pub fn error(errno: i64) -> Self {
        Self {
            retval: -errno,
            out_len: 0,
            out_ptr: None,
            errno,
        }
    }

    pub fn data(retval: i64, out_ptr: Ipa, out_len: u64) -> Self {
        Self {
            retval,
            out_len,
            out_ptr: Some(out_ptr),
            errno: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExitReason {
    Trap(PendingTrap),
    Exited(i64),
}

/// Result of one scheduling turn for a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriveOutcome {
    /// The workload finished with this code.
    Exited(i64),
    /// One trap was fully serviced and the container resumed.
    Progress,
    /// The System Realm is waiting on the host; retry later.
    Deferred,
    Killed(i64),
    /// Nothing to do: destroyed, exited or paused.
    Idle,
}

enum Step {
    Continue,
    Trap(TrapCause, Ipa),
    Exit(i64),
}

impl World {
    /// Runs the container from its current context until it traps or exits.
    pub fn enter_container(&mut self, realm: RealmId) -> Result<ExitReason, RmmError> {
        let d = self.container(realm)?;
        let first = match (d.state, d.live.is_some()) {
            (RealmState::Runnable, _) => true,
            (RealmState::Running, true) => false,
            (state, _) => {
                return Err(RmmError::WrongState {
                    realm,
                    state,
                    op: "enter",
                })
            }
        };
        if first {
            let ctx = CpuContext::new(d.entry_point, d.stack_pointer, d.ttbr0, d.vbar);
            let param = d.param_ipa();
            self.desc_mut(realm)?.live = Some(ctx);
            self.set_state(realm, RealmState::Running);
            self.cpu = super::RegisterSnapshot {
                vbar: super::vbar_token(realm),
                ttbr0: super::ttbr0_token(realm),
            };
            self.rsi_log("enter", realm, "", "running");
            match self.realm_read(realm, param, super::PARAM_LEN as u64, "param-read") {
                Ok(bytes) => self
                    .desc_mut(realm)?
                    .observations
                    .push(Observation::Param(bytes)),
                Err(f) => {
                    let pc = d_pc(self, realm);
                    return self.raise(realm, abort_cause(f, super::PARAM_LEN as u64), pc);
                }
            }
        }
        let mut fetched_page: Option<u64> = None;
        loop {
            let d = self.desc(realm)?;
            let ctx = d
                .live
                .as_ref()
                .expect("running container has a live context");
            let pc = ctx.pc;
            let index = ((pc.0 - d.entry_point.0) / INSTR_BYTES) as usize;
            let Some(instr) = d.program.get(index).cloned() else {
                return self.exit_container(realm, 0);
            };
            if fetched_page != Some(pc.page().0) {
                if let Err(f) = self.realm_fetch(realm, pc) {
                    let cause = TrapCause::DataAbort {
                        esr: SyndromeInfo {
                            class: AbortClass::Instruction,
                            write_not_read: false,
                            access_size: INSTR_BYTES,
                        },
                        far: f.ipa,
                    };
                    return self.raise(realm, cause, pc);
                }
                fetched_page = Some(pc.page().0);
            }
            match self.execute(realm, &instr)? {
                Step::Continue => {
                    if let Some(ctx) = self.desc_mut(realm)?.live.as_mut() {
                        ctx.pc = pc.add(INSTR_BYTES);
                    }
                }
                Step::Trap(cause, saved_pc) => return self.raise(realm, cause, saved_pc),
                Step::Exit(code) => return self.exit_container(realm, code),
            }
        }
    }

    fn execute(&mut self, realm: RealmId, instr: &Instr) -> Result<Step, RmmError> {
        let d = self.desc(realm)?;
        let base = d.window_base();
        let pc = d.live.as_ref().expect("live").pc;
        Ok(match instr {
            Instr::Store { offset, data } => {
                match self.realm_write(realm, base.add(*offset), data, "store") {
                    Ok(()) => Step::Continue,
                    Err(f) => Step::Trap(abort_cause(f, data.len() as u64), pc),
                }
            }
            Instr::Load { offset, len } => {
                match self.realm_read(realm, base.add(*offset), *len, "load") {
                    Ok(data) => {
                        self.desc_mut(realm)?.observations.push(Observation::Load {
                            offset: *offset,
                            data,
                        });
                        Step::Continue
                    }
                    Err(f) => Step::Trap(abort_cause(f, *len), pc),
                }
            }
            Instr::Mov { reg, value } => {
                self.live_mut(realm)?.regs[*reg as usize] = *value;
                Step::Continue
            }
            Instr::Copy { dst, src } => {
                let ctx = self.live_mut(realm)?;
                ctx.regs[*dst as usize] = ctx.regs[*src as usize];
                Step::Continue
            }
            Instr::Syscall { number, args } => {
                let mut vals = [0u64; 6];
                {
                    let ctx = self.live_mut(realm)?;
                    for (slot, a) in vals.iter_mut().zip(args) {
                        *slot = match *a {
                            Arg::Imm(v) => v,
                            Arg::Reg(r) => ctx.regs[r as usize],
                            Arg::Ptr(off) => base.0 + off,
                        };
                    }
                    ctx.regs[..6].copy_from_slice(&vals);
                    ctx.regs[SYSNO_REG] = number.number();
                }
                if *number == Sysno::Exit {
                    Step::Exit(vals[0] as i64)
                } else {
                    Step::Trap(
                        TrapCause::Syscall {
                            number: *number,
                            args: vals,
                        },
                        pc,
                    )
                }
            }
            Instr::Irq { line } => Step::Trap(TrapCause::Irq { line: *line }, pc.add(INSTR_BYTES)),
            Instr::Exit { code } => Step::Exit(*code),
            Instr::Share { kind, offset, size } => {
                let ret =
                    match self.rsi_register_shared_buffer(realm, *kind, base.add(*offset), *size) {
                        Ok(_) => 0,
                        Err(_) => -errno::EINVAL,
                    };
                self.live_mut(realm)?.regs[RESULT_REG] = ret as u64;
                Step::Continue
            }
        })
    }

    fn live_mut(&mut self, realm: RealmId) -> Result<&mut CpuContext, RmmError> {
        let d = self.desc_mut(realm)?;
        let state = d.state;
        d.live.as_mut().ok_or(RmmError::WrongState {
            realm,
            state,
            op: "execute",
        })
    }

    /// Captures a trap: context saved, state TrapPending, control to the monitor.
    fn raise(
        &mut self,
        realm: RealmId,
        cause: TrapCause,
        saved_pc: Ipa,
    ) -> Result<ExitReason, RmmError> {
        let step = self.trace.emit(Event::Trap {
            realm,
            cause: cause.to_string(),
        });
        let d = self.desc_mut(realm)?;
        let mut ctx = d.live.take().expect("trap from a live context");
        ctx.pc = saved_pc;
        d.saved_context = Some(ctx);
        let pending = PendingTrap {
            realm,
            cause: cause.clone(),
            step,
        };
        d.pending = Some(pending.clone());
        self.set_state(realm, RealmState::TrapPending);
        match cause {
            TrapCause::Syscall { .. } => self.bump(|c| c.syscall_traps += 1),
            TrapCause::DataAbort { .. } => self.bump(|c| c.abort_traps += 1),
            TrapCause::Irq { .. } => self.bump(|c| c.irq_traps += 1),
        }
        self.switch(domain_of(realm), Domain::Rmm, "trap");
        Ok(ExitReason::Trap(pending))
    }

    fn exit_container(&mut self, realm: RealmId, code: i64) -> Result<ExitReason, RmmError> {
        let d = self.desc_mut(realm)?;
        d.live = None;
        d.exited = Some(code);
        self.trace.emit(Event::Exit { realm, code });
        Ok(ExitReason::Exited(code))
    }

    /// Validates and redirects the pending trap's arguments and forwards it
    /// to the System Realm.
    pub fn handle_trap(&mut self, realm: RealmId) -> Result<ForwardedRequest, RmmError> {
        let d = self.container(realm)?;
        let pending = match (&d.pending, d.state) {
            (Some(p), RealmState::TrapPending) if d.forwarded.is_none() => p.clone(),
            _ => {
                return Err(RmmError::WrongState {
                    realm,
                    state: d.state,
                    op: "handle a trap",
                })
            }
        };
        let data_buf = d.buffer(BufferKind::Data).cloned();
        let mut cause = pending.cause.clone();
        let mut redirected = None;
        if let TrapCause::Syscall { number, args } = &mut cause {
            if let Some(p) = number.pointer_arg() {
                let buf = data_buf.clone().ok_or(RmmError::NoSharedBuffer)?;
                let (ptr, len) = (Ipa(args[p.ptr]), args[p.len]);
                if len > buf.size {
                    return Err(RmmError::BufferOverflow {
                        len,
                        size: buf.size,
                    });
                }
                if buf.contains(ptr, len) {
                    // Already in the shared window.
                } else if d.in_private(ptr, len) {
                    if !self.mutations.has(Flag::SkipRedirect) {
                        if p.dir == Direction::In {
                            self.maint_clean_ipa(
                                MaintenanceSite::TrapArgClean,
                                realm,
                                ptr,
                                len,
                                WorldId::Root,
                            );
                            let bytes = self.monitor_read_ipa(realm, ptr, len, "redirect");
                            self.monitor_write_ipa(realm, buf.va, &bytes);
                        }
                        args[p.ptr] = buf.va.0;
                        redirected = Some(Redirect {
                            private: ptr,
                            len,
                            dir: p.dir,
                        });
                    }
                } else {
                    return Err(RmmError::BadAddress(ptr));
                }
                let fwd_ptr = Ipa(args[p.ptr]);
                if p.dir == Direction::In {
                    self.maint_clean_ipa(
                        MaintenanceSite::ForwardClean,
                        realm,
                        fwd_ptr,
                        len,
                        WorldId::Root,
                    );
                }
                if !buf.contains(fwd_ptr, len) {
                    self.fail(
                        "POINTER-CONFINEMENT",
                        format!("realm {realm} forwarded {fwd_ptr}+{len} outside its Data buffer"),
                    );
                }
            }
        }
        let fwd = ForwardedRequest {
            realm,
            cause,
            original: pending.cause,
            redirected,
            buffer: data_buf,
        };
        self.desc_mut(realm)?.forwarded = Some(fwd.clone());
        self.switch(Domain::Rmm, Domain::SystemRealm, "forward");
        Ok(fwd)
    }

    /// Completes a trap inside the monitor with an error return, for
    /// requests that never reach the System Realm.
    pub(crate) fn fail_trap_locally(&mut self, realm: RealmId, errno: i64) -> Result<(), RmmError> {
        let d = self.desc_mut(realm)?;
        let Some(mut ctx) = d.saved_context.take() else {
            return Err(RmmError::WrongState {
                realm,
                state: d.state,
                op: "fail a trap",
            });
        };
        let call = match d.pending.take().map(|p| p.cause) {
            Some(TrapCause::Syscall { number, .. }) => {
                ctx.regs[RESULT_REG] = (-errno) as u64;
                ctx.pc = ctx.pc.add(INSTR_BYTES);
                number.name()
            }
            _ => "irq",
        };
        let pc = ctx.pc;
        d.live = Some(ctx);
        d.observations.push(Observation::Retval {
            call,
            value: -errno,
        });
        self.set_state(realm, RealmState::Running);
        self.rsi_log("reenter", realm, format!("errno={errno}"), "local");
        self.switch(Domain::Rmm, domain_of(realm), "eret");
        self.trace.emit(Event::Reentry { realm, pc });
        Ok(())
    }

    /// Delivers a verified reply and resumes the container at its saved
    /// context.
    pub fn reenter_container(
        &mut self,
        realm: RealmId,
        reply: SyscallReply,
    ) -> Result<(), RmmError> {
        let d = self.container(realm)?;
        let fwd = match (&d.forwarded, d.state) {
            (Some(f), RealmState::TrapPending) => f.clone(),
            _ => {
                return Err(RmmError::WrongState {
                    realm,
                    state: d.state,
                    op: "reenter",
                })
            }
        };
        if !self.mutations.has(Flag::SkipVerify) {
            if let Verdict::Rejected(reason) = verify_result(&reply, fwd.buffer.as_ref(), &fwd) {
                self.rsi_log(
                    "reenter",
                    realm,
                    format!("retval={} out_len={}", reply.retval, reply.out_len),
                    format!("rejected:{reason}"),
                );
                return Err(RmmError::UnvalidatedReply(reason));
            }
        }
        let cap = fwd.buffer.as_ref().map_or(0, |b| b.size);
        if reply.out_len > cap || reply.out_len > fwd.request_len() {
            self.fail(
                "IAGO-GATE",
                format!(
                    "reply of {} bytes delivered for a {}-byte request into a {cap}-byte buffer",
                    reply.out_len,
                    fwd.request_len()
                ),
            );
        }
        if let (Some(r), Some(buf)) = (fwd.redirected, fwd.buffer.as_ref()) {
            if r.dir == Direction::Out && reply.out_len > 0 {
                let n = reply.out_len.min(r.len).min(buf.size);
                let src = reply
                    .out_ptr
                    .filter(|p| buf.contains(*p, n))
                    .unwrap_or(buf.va);
                let bytes = self.monitor_read_ipa(realm, src, n, "copy-back");
                self.monitor_write_ipa(realm, r.private, &bytes);
                self.maint_clean_ipa(
                    MaintenanceSite::CopyBackClean,
                    realm,
                    r.private,
                    n,
                    WorldId::Root,
                );
            }
        }
        let d = self.desc_mut(realm)?;
        let mut ctx = d.saved_context.take().expect("trap pending has a context");
        let call = match fwd.original {
            TrapCause::Syscall { number, .. } => {
                ctx.regs[RESULT_REG] = reply.retval as u64;
                ctx.pc = ctx.pc.add(INSTR_BYTES);
                Some(number.name())
            }
            _ => None,
        };
        let pc = ctx.pc;
        d.live = Some(ctx);
        d.pending = None;
        d.forwarded = None;
        if let Some(call) = call {
            d.observations.push(Observation::Retval {
                call,
                value: reply.retval,
            });
        }
        self.set_state(realm, RealmState::Running);
        self.rsi_log(
            "reenter",
            realm,
            format!("retval={} out_len={}", reply.retval, reply.out_len),
            "running",
        );
        self.switch(Domain::Rmm, domain_of(realm), "eret");
        self.trace.emit(Event::Reentry { realm, pc });
        Ok(())
    }

    /// Stops a container for good without releasing its memory.
    pub fn kill_container(&mut self, realm: RealmId, code: i64) -> Result<(), RmmError> {
        let d = self.desc_mut(realm)?;
        if d.state == RealmState::Destroyed || d.exited.is_some() {
            return Ok(());
        }
        d.pending = None;
        d.forwarded = None;
        d.live = None;
        d.exited = Some(code);
        self.rsi_log("kill", realm, format!("code={code}"), "stopped");
        self.trace.emit(Event::Exit { realm, code });
        Ok(())
    }

    /// Holds a running container off the CPU through the trap save path.
    pub fn pause_container(&mut self, realm: RealmId) -> Result<(), RmmError> {
        let d = self.container(realm)?;
        if d.state != RealmState::Running || d.live.is_none() {
            return Err(RmmError::WrongState {
                realm,
                state: d.state,
                op: "pause",
            });
        }
        let pc = d.live.as_ref().expect("live").pc;
        self.raise(realm, TrapCause::Irq { line: PAUSE_LINE }, pc)?;
        self.rsi_log("pause", realm, "", "held");
        Ok(())
    }

    /// Resumes a paused container at exactly the context it was paused in.
    pub fn unpause_container(&mut self, realm: RealmId) -> Result<(), RmmError> {
        let d = self.container(realm)?;
        let paused = matches!(
            (&d.pending, &d.forwarded, d.state),
            (
                Some(PendingTrap {
                    cause: TrapCause::Irq { line: PAUSE_LINE },
                    ..
                }),
                None,
                RealmState::TrapPending
            )
        );
        if !paused {
            return Err(RmmError::WrongState {
                realm,
                state: d.state,
                op: "unpause",
            });
        }
        let d = self.desc_mut(realm)?;
        let ctx = d.saved_context.take().expect("paused context");
        let pc = ctx.pc;
        d.live = Some(ctx);
        d.pending = None;
        self.set_state(realm, RealmState::Running);
        self.rsi_log("unpause", realm, "", "running");
        self.switch(Domain::Rmm, domain_of(realm), "eret");
        self.trace.emit(Event::Reentry { realm, pc });
        Ok(())
    }

    pub fn is_paused(&self, realm: RealmId) -> bool {
        self.desc(realm).is_ok_and(|d| {
            matches!(
                (&d.pending, &d.forwarded),
                (
                    Some(PendingTrap {
                        cause: TrapCause::Irq { line: PAUSE_LINE },
                        ..
                    }),
                    None
                )
            )
        })
    }

    /// One scheduling turn: run the container until its next trap, then
    /// carry the trap through the System Realm and back.
    pub fn drive(&mut self, realm: RealmId) -> Result<DriveOutcome, RmmError> {
        let d = self.container(realm)?;
        if !d.is_live() || self.is_paused(realm) {
            return Ok(DriveOutcome::Idle);
        }
        if d.state == RealmState::TrapPending && d.forwarded.is_none() {
            return Ok(DriveOutcome::Idle);
        }
        if d.forwarded.is_none() {
            match self.enter_container(realm)? {
                ExitReason::Exited(code) => return Ok(DriveOutcome::Exited(code)),
                ExitReason::Trap(_) => {}
            }
            if let Err(e) = self.handle_trap(realm) {
                return match e.errno() {
                    Some(errno) => {
                        self.fail_trap_locally(realm, errno)?;
                        Ok(DriveOutcome::Progress)
                    }
                    None => Err(e),
                };
            }
        }
        match self.service_trap(realm)? {
            ServiceOutcome::Reply(reply) => {
                self.switch(Domain::SystemRealm, Domain::Rmm, "reply");
                match self.reenter_container(realm, reply) {
                    Ok(()) => Ok(DriveOutcome::Progress),
                    Err(RmmError::UnvalidatedReply(reason)) => {
                        self.record_detection(realm, "reply", format!("rejected: {reason}"));
                        self.kill_container(realm, EXIT_SECURITY_ABORT)?;
                        Ok(DriveOutcome::Killed(EXIT_SECURITY_ABORT))
                    }
                    Err(e) => Err(e),
                }
            }
            ServiceOutcome::Kill(code) => {
                self.switch(Domain::SystemRealm, Domain::Rmm, "kill");
                self.kill_container(realm, code)?;
                Ok(DriveOutcome::Killed(code))
            }
            ServiceOutcome::Deferred => Ok(DriveOutcome::Deferred),
        }
    }
}

/// Interrupt line used to hold a paused container.
pub const PAUSE_LINE: u32 = 0xffff;

fn abort_cause(f: MemFault, len: u64) -> TrapCause {
    TrapCause::DataAbort {
        esr: SyndromeInfo {
            class: AbortClass::Data,
            write_not_read: f.write,
            access_size: len,
        },
        far: f.ipa,
    }
}

fn d_pc(world: &World, realm: RealmId) -> Ipa {
    world
        .descriptor(realm)
        .and_then(|d| d.live.as_ref().map(|c| c.pc))
        .unwrap_or(Ipa(0))
}
