// SPDX-License-Identifier: Apache-2.0

//! The System Realm: creation requests, forwarded-syscall service through
//! the untrusted host, shielded I/O, and reply verification.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coherence::MaintenanceSite;
use crate::cpu::{CallClass, Sysno};
use crate::granule::{GranuleId, RealmId, WorldId};
use crate::host::{HostCall, HostReply, HostRequest, O_CREAT, O_TRUNC, PID_BASE};
use crate::image::EncryptedImage;
use crate::rmm::{
    ContainerSpec, Flag, ForwardedRequest, RmmError, SharedBufferRecord, TrapCause, World,
    BOUNCE_SIZE, EXIT_FAULT, EXIT_HOST_UNRESPONSIVE, EXIT_SECURITY_ABORT, SYSTEM_REALM,
};
use crate::rtt::Ipa;
use crate::shielded_io::{
    channel_session_key, open_block, open_stream, seal_block, BlockAddress, FileHeader, Key,
    RealmKeySet, ShieldedBlock, StreamError, StreamSealer, BLOCK_SIZE, FILE_HEADER_LEN,
    FILE_RECORD_LEN, TAG_LEN,
};
use crate::trace::Event;

pub use crate::rmm::SyscallReply;

/// Linux errno values used in replies.
pub mod errno {
    pub const ENOENT: i64 = 2;
    pub const EIO: i64 = 5;
    pub const E2BIG: i64 = 7;
    pub const EBADF: i64 = 9;
    pub const EAGAIN: i64 = 11;
    pub const EACCES: i64 = 13;
    pub const EFAULT: i64 = 14;
    pub const EINVAL: i64 = 22;
    pub const ENOSYS: i64 = 38;
    pub const EMSGSIZE: i64 = 90;
    pub const ENOBUFS: i64 = 105;
}

/// Largest magnitude a negative return value may have.
pub const MAX_ERRNO: i64 = 4095;
/// Host attempts per request before the System Realm gives up.
pub const HOST_ATTEMPTS: usize = 4;
/// Stream id of the shielded console.
pub const CONSOLE_STREAM: u16 = 1;
const CHANNEL_STREAM_BASE: u16 = 0x100;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Policy {
    /// Required image hash, when pinned.
    pub sha256: Option<[u8; 32]>,
    pub max_shared_buffer: u64,
}

#[derive(Debug, Clone)]
pub struct CreateRequest {
    pub image: EncryptedImage,
    pub granules: usize,
    pub entry: u64,
    pub stack_size: u64,
    pub policy: Policy,
    pub shielded_console: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    SizeExceedsBuffer,
    ExceedsRequest,
    InconsistentRetval,
    OutsideBuffer,
    PointerMismatch,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::SizeExceedsBuffer => "size-exceeds-buffer",
            RejectReason::ExceedsRequest => "exceeds-request",
            RejectReason::InconsistentRetval => "inconsistent-retval",
            RejectReason::OutsideBuffer => "outside-buffer",
            RejectReason::PointerMismatch => "pointer-mismatch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Rejected(RejectReason),
}

/// Checks a reply against the buffer it lands in and the request it answers.
pub fn verify_result(
    reply: &SyscallReply,
    rec: Option<&SharedBufferRecord>,
    fwd: &ForwardedRequest,
) -> Verdict {
    use RejectReason::*;
    let cap = rec.map_or(0, |r| r.size);
    if reply.out_len > cap {
        return Verdict::Rejected(SizeExceedsBuffer);
    }
    let request = fwd.request_len();
    if reply.out_len > request {
        return Verdict::Rejected(ExceedsRequest);
    }
    let consistent = if reply.retval < 0 {
        reply.retval >= -MAX_ERRNO && reply.out_len == 0 && reply.errno == -reply.retval
    } else {
        reply.errno == 0
            && match fwd.sysno().map(Sysno::class) {
                Some(CallClass::ReadLike) => reply.retval as u64 == reply.out_len,
                Some(CallClass::WriteLike) => reply.retval as u64 <= fwd.write_len(),
                _ => true,
            }
    };
    if !consistent {
        return Verdict::Rejected(InconsistentRetval);
    }
    if reply.out_len > 0 {
        let Some(ptr) = reply.out_ptr else {
            return Verdict::Rejected(OutsideBuffer);
        };
        if !rec.is_some_and(|r| r.contains(ptr, reply.out_len)) {
            return Verdict::Rejected(OutsideBuffer);
        }
        if fwd.pointer().map(|p| p.0) != Some(ptr) {
            return Verdict::Rejected(PointerMismatch);
        }
    }
    Verdict::Valid
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SystemError {
    #[error("image hash {actual} does not match the pinned {expected}")]
    PolicyViolation { expected: String, actual: String },
    #[error(transparent)]
    Rmm(#[from] RmmError),
}

/// What the System Realm decided for one forwarded trap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceOutcome {
    Reply(SyscallReply),
    Kill(i64),
    /// Waiting for the host (an empty socket); try again on a later turn.
    Deferred,
}

/// Host misbehaviour noticed by the System Realm or the monitor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detection {
    pub step: u64,
    pub realm: RealmId,
    pub target: String,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Fd {
    Plain {
        hfd: u64,
        pos: u64,
    },
    Shielded {
        path: String,
        hfd: u64,
        pos: u64,
    },
    Channel {
        name: String,
        hfd: u64,
    },
    /// A socket with no registered channel: bytes pass in the clear.
    Socket {
        hfd: u64,
    },
}

#[derive(Debug)]
struct Tenant {
    keys: RealmKeySet,
    pid: u32,
    fds: BTreeMap<u64, Fd>,
    next_fd: u64,
    console: Option<StreamSealer>,
}

/// Trusted metadata for one shielded file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamMeta {
    pub owner: RealmId,
    pub stream_id: u32,
    /// Epoch written into the file header when the stream was (re)created.
    pub header_epoch: u32,
    pub next_epoch: u32,
    /// Epoch of the current version of each block.
    pub epochs: Vec<u32>,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpec {
    pub name: String,
    pub a: RealmId,
    pub b: RealmId,
    pub shielded: bool,
}

#[derive(Debug, Clone)]
struct Channel {
    spec: ChannelSpec,
    send_seq: [u32; 2],
    recv_seq: [u32; 2],
}

impl Channel {
    fn end_of(&self, realm: RealmId) -> Option<usize> {
        if realm == self.spec.a {
            Some(0)
        } else if realm == self.spec.b {
            Some(1)
        } else {
            None
        }
    }
}

/// System Realm service state.
#[derive(Debug)]
pub struct SystemServices {
    bounce: Vec<GranuleId>,
    bounce_va: Ipa,
    tenants: BTreeMap<RealmId, Tenant>,
    streams: BTreeMap<String, StreamMeta>,
    next_stream: u32,
    channels: BTreeMap<String, Channel>,
    detections: Vec<Detection>,
    shielded_plaintext: Vec<Vec<u8>>,
}

impl Clone for SystemServices {
    fn clone(&self) -> Self {
        // Sealers carry counters only; rebuild them from the same keys.
        Self {
            bounce: self.bounce.clone(),
            bounce_va: self.bounce_va,
            tenants: BTreeMap::new(),
            streams: self.streams.clone(),
            next_stream: self.next_stream,
            channels: self.channels.clone(),
            detections: self.detections.clone(),
            shielded_plaintext: self.shielded_plaintext.clone(),
        }
    }
}

impl SystemServices {
    pub(crate) fn new(bounce: Vec<GranuleId>, bounce_va: Ipa) -> Self {
        Self {
            bounce,
            bounce_va,
            tenants: BTreeMap::new(),
            streams: BTreeMap::new(),
            next_stream: 1,
            channels: BTreeMap::new(),
            detections: Vec::new(),
            shielded_plaintext: Vec::new(),
        }
    }

    pub fn bounce_granules(&self) -> &[GranuleId] {
        &self.bounce
    }

    pub fn bounce_va(&self) -> Ipa {
        self.bounce_va
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    /// Every plaintext that went through a shielded path, for leak scans.
    pub fn shielded_plaintext(&self) -> &[Vec<u8>] {
        &self.shielded_plaintext
    }

    pub fn stream(&self, path: &str) -> Option<&StreamMeta> {
        self.streams.get(path)
    }

    pub fn pid_of(realm: RealmId) -> u32 {
        PID_BASE + realm.0
    }
}

/// Ways a service attempt can end other than a reply.
enum Abort {
    Unresponsive,
    Integrity { target: String, what: String },
    Deferred,
}

type Svc<T> = Result<T, Abort>;

fn integrity<T>(target: &str, what: impl Into<String>) -> Svc<T> {
    Err(Abort::Integrity {
        target: target.to_string(),
        what: what.into(),
    })
}

impl World {
    /// Creates, loads and initializes a container, enforcing the pinned
    /// image hash. Any failure after creation destroys the realm again.
    pub fn handle_create_request(&mut self, req: &CreateRequest) -> Result<RealmId, SystemError> {
        let spec = ContainerSpec {
            granules: req.granules,
            entry: req.entry,
            stack_size: req.stack_size,
            max_shared_buffer: req.policy.max_shared_buffer,
        };
        let id = self.rsi_create_container_realm(spec)?;
        let measurement = match self.rsi_load_image(id, &req.image) {
            Ok(m) => m,
            Err(e) => {
                self.destroy_realm(id)?;
                return Err(e.into());
            }
        };
        if let Some(pin) = req.policy.sha256 {
            if pin != measurement {
                self.destroy_realm(id)?;
                return Err(SystemError::PolicyViolation {
                    expected: hex::encode(pin),
                    actual: hex::encode(measurement),
                });
            }
        }
        if let Err(e) = self.init_container_runtime(id) {
            self.destroy_realm(id)?;
            return Err(e.into());
        }
        self.register_tenant(id, req.shielded_console);
        Ok(id)
    }

    /// Sets up per-tenant keys and descriptors. Idempotent.
    pub fn register_tenant(&mut self, realm: RealmId, shielded_console: bool) {
        let Some(measurement) = self.descriptor(realm).and_then(|d| d.measurement) else {
            return;
        };
        let prov = self.provisioning.clone();
        let Some(sys) = self.system.as_mut() else {
            return;
        };
        sys.tenants.entry(realm).or_insert_with(|| {
            let keys = RealmKeySet::derive(&prov, &measurement, realm);
            let console = shielded_console
                .then(|| StreamSealer::new(keys.console_key.clone(), realm, CONSOLE_STREAM));
            Tenant {
                keys,
                pid: SystemServices::pid_of(realm),
                fds: BTreeMap::new(),
                next_fd: 3,
                console,
            }
        });
    }

    pub fn register_channel(&mut self, spec: ChannelSpec) -> Result<(), RmmError> {
        let sys = self.system.as_mut().ok_or(RmmError::SystemRealmMissing)?;
        sys.channels.insert(
            spec.name.clone(),
            Channel {
                spec,
                send_seq: [0; 2],
                recv_seq: [0; 2],
            },
        );
        Ok(())
    }

    /// Tenant-side view of a shielded console: decrypts what the host holds.
    pub fn tenant_console(&self, realm: RealmId) -> Result<Vec<u8>, StreamError> {
        let measurement = self
            .descriptor(realm)
            .and_then(|d| d.measurement)
            .unwrap_or([0; 32]);
        let keys = RealmKeySet::derive(&self.provisioning, &measurement, realm);
        open_stream(
            &keys.console_key,
            CONSOLE_STREAM,
            self.host.console(SystemServices::pid_of(realm)),
        )
    }

    /// At-rest check of every shielded file the host holds against the
    /// System Realm's metadata. Each bad file is recorded as a detection;
    /// returns how many were bad.
    pub fn verify_shielded_stores(&mut self) -> usize {
        let Some(sys) = self.system.as_ref() else {
            return 0;
        };
        let checks: Vec<(String, StreamMeta, Option<Key>)> = sys
            .streams
            .iter()
            .map(|(p, m)| {
                let key = sys.tenants.get(&m.owner).map(|t| t.keys.file_key.clone());
                (p.clone(), m.clone(), key)
            })
            .collect();
        let skip_seal = self.mutations.has(Flag::SkipSeal);
        let mut bad = 0;
        for (path, meta, key) in checks {
            let file = self.host.file(&path).unwrap_or_default();
            let verdict = match key {
                Some(key) => check_stream_file(&key, &meta, file, skip_seal),
                None => Err("no key for the owner".to_string()),
            };
            if let Err(what) = verdict {
                self.record_detection(meta.owner, &path, format!("at rest: {what}"));
                bad += 1;
            }
        }
        bad
    }

    pub(crate) fn record_detection(&mut self, realm: RealmId, target: &str, what: String) {
        let step = self.trace.emit(Event::Harness {
            what: format!("detected realm={} {target}: {what}", realm.0),
        });
        if let Some(sys) = self.system.as_mut() {
            sys.detections.push(Detection {
                step,
                realm,
                target: target.to_string(),
                what,
            });
        }
    }

    /// Services the forwarded request of `realm`.
    pub fn service_trap(&mut self, realm: RealmId) -> Result<ServiceOutcome, RmmError> {
        let d = self.container(realm)?;
        let Some(fwd) = d.forwarded.clone() else {
            return Err(RmmError::WrongState {
                realm,
                state: d.state,
                op: "service a trap",
            });
        };
        if self.system.is_none() {
            return Err(RmmError::SystemRealmMissing);
        }
        self.register_tenant(realm, false);
        let res = match fwd.cause {
            TrapCause::DataAbort { .. } => return Ok(ServiceOutcome::Kill(EXIT_FAULT)),
            TrapCause::Irq { .. } => Ok(SyscallReply::ok(0)),
            TrapCause::Syscall { number, args } => self.service_syscall(realm, &fwd, number, args),
        };
        Ok(match res {
            Ok(reply) => ServiceOutcome::Reply(reply),
            Err(Abort::Deferred) => ServiceOutcome::Deferred,
            Err(Abort::Unresponsive) => {
                self.note(format!("realm {} host unresponsive", realm.0));
                ServiceOutcome::Kill(EXIT_HOST_UNRESPONSIVE)
            }
            Err(Abort::Integrity { target, what }) => {
                self.record_detection(realm, &target, what);
                ServiceOutcome::Kill(EXIT_SECURITY_ABORT)
            }
        })
    }

    fn sys(&mut self) -> &mut SystemServices {
        self.system.as_mut().expect("System Realm present")
    }

    fn tenant(&mut self, realm: RealmId) -> &mut Tenant {
        self.sys()
            .tenants
            .get_mut(&realm)
            .expect("tenant registered")
    }

    fn service_syscall(
        &mut self,
        realm: RealmId,
        fwd: &ForwardedRequest,
        number: Sysno,
        args: [u64; 6],
    ) -> Svc<SyscallReply> {
        use errno::*;
        match number {
            Sysno::Getpid => Ok(SyscallReply::ok(i64::from(self.tenant(realm).pid))),
            Sysno::ClockRead => {
                let r = self.host_call(realm, &[], HostCall::ClockRead)?;
                Ok(SyscallReply::ok(r.retval))
            }
            Sysno::Open => self.sys_open(realm, Ipa(args[0]), args[1], args[2]),
            Sysno::Close => {
                let fd = args[0];
                if fd <= 2 {
                    return Ok(SyscallReply::ok(0));
                }
                match self.tenant(realm).fds.remove(&fd) {
                    Some(
                        Fd::Plain { hfd, .. }
                        | Fd::Shielded { hfd, .. }
                        | Fd::Channel { hfd, .. }
                        | Fd::Socket { hfd },
                    ) => {
                        self.host_call(realm, &[], HostCall::Close { hfd })?;
                        Ok(SyscallReply::ok(0))
                    }
                    None => Ok(SyscallReply::error(EBADF)),
                }
            }
            Sysno::Lseek => self.sys_lseek(realm, args[0], args[1] as i64, args[2]),
            Sysno::Read | Sysno::SockRecv => {
                let (fd, ptr, len) = (args[0], Ipa(args[1]), args[2]);
                let entry = self.tenant(realm).fds.get(&fd).cloned();
                match (number, fd, entry) {
                    (Sysno::Read, 0, _) => Ok(SyscallReply::data(0, ptr, 0)),
                    (Sysno::Read, _, Some(Fd::Plain { hfd, pos })) => {
                        let r = self.host_call(
                            realm,
                            &[],
                            HostCall::Pread {
                                hfd,
                                offset: pos,
                                len,
                            },
                        )?;
                        if r.retval > 0 {
                            if let Some(Fd::Plain { pos, .. }) = self.tenant(realm).fds.get_mut(&fd)
                            {
                                *pos += r.retval as u64;
                            }
                        }
                        Ok(self.pass_through(fwd, ptr, r))
                    }
                    (Sysno::Read, _, Some(Fd::Shielded { path, hfd, pos })) => {
                        let data = self.read_shielded(realm, &path, hfd, pos, len)?;
                        if let Some(Fd::Shielded { pos, .. }) = self.tenant(realm).fds.get_mut(&fd)
                        {
                            *pos += data.len() as u64;
                        }
                        Ok(self.deliver(fwd, ptr, &data))
                    }
                    (_, _, Some(Fd::Channel { name, hfd })) => {
                        let data = self.channel_recv(realm, &name, hfd, len)?;
                        Ok(self.deliver(fwd, ptr, &data))
                    }
                    (_, _, Some(Fd::Socket { hfd })) => {
                        let r = self.host_call(realm, &[], HostCall::SockRecv { hfd, len })?;
                        if r.retval == -EAGAIN {
                            return Err(Abort::Deferred);
                        }
                        Ok(self.pass_through(fwd, ptr, r))
                    }
                    _ => Ok(SyscallReply::error(EBADF)),
                }
            }
            Sysno::Write | Sysno::SockSend => {
                let (fd, ptr, len) = (args[0], Ipa(args[1]), args[2]);
                let data = self.system_read(ptr, len);
                let entry = self.tenant(realm).fds.get(&fd).cloned();
                match (number, fd, entry) {
                    (Sysno::Write, 1 | 2, _) => {
                        self.console_emit(realm, &data)?;
                        Ok(SyscallReply::ok(data.len() as i64))
                    }
                    (Sysno::Write, _, Some(Fd::Plain { hfd, pos })) => {
                        let r = self.host_call(
                            realm,
                            &data,
                            HostCall::Pwrite {
                                hfd,
                                offset: pos,
                                len,
                            },
                        )?;
                        if r.retval > 0 {
                            if let Some(Fd::Plain { pos, .. }) = self.tenant(realm).fds.get_mut(&fd)
                            {
                                *pos += r.retval as u64;
                            }
                        }
                        Ok(claimed(r.retval))
                    }
                    (Sysno::Write, _, Some(Fd::Shielded { path, hfd, pos })) => {
                        self.write_shielded(realm, &path, hfd, pos, &data)?;
                        if let Some(Fd::Shielded { pos, .. }) = self.tenant(realm).fds.get_mut(&fd)
                        {
                            *pos += data.len() as u64;
                        }
                        Ok(SyscallReply::ok(data.len() as i64))
                    }
                    (_, _, Some(Fd::Channel { name, hfd })) => {
                        if data.len() > BLOCK_SIZE {
                            return Ok(SyscallReply::error(EMSGSIZE));
                        }
                        self.channel_send(realm, &name, hfd, &data)?;
                        Ok(SyscallReply::ok(data.len() as i64))
                    }
                    (_, _, Some(Fd::Socket { hfd })) => {
                        let r = self.host_call(realm, &data, HostCall::SockSend { hfd, len })?;
                        Ok(claimed(r.retval))
                    }
                    _ => Ok(SyscallReply::error(EBADF)),
                }
            }
            Sysno::Exit => Ok(SyscallReply::error(ENOSYS)),
        }
    }

    fn sys_open(&mut self, realm: RealmId, ptr: Ipa, len: u64, flags: u64) -> Svc<SyscallReply> {
        use errno::*;
        let raw = self.system_read(ptr, len);
        let path = String::from_utf8_lossy(&raw).into_owned();
        if path.starts_with("/secure/") {
            let existing = self.sys().streams.get(&path).cloned();
            match &existing {
                Some(m) if m.owner != realm => return Ok(SyscallReply::error(EACCES)),
                None if flags & O_CREAT == 0 => return Ok(SyscallReply::error(ENOENT)),
                _ => {}
            }
            let r = self.host_call(
                realm,
                &raw,
                HostCall::Open {
                    path_len: len,
                    flags: O_CREAT,
                },
            )?;
            if r.retval < 0 {
                return integrity(&path, format!("host refused to open ({})", r.retval));
            }
            let hfd = r.retval as u64;
            if existing.is_none() || flags & O_TRUNC != 0 {
                let sys = self.sys();
                let meta = match existing {
                    Some(mut m) => {
                        m.epochs.clear();
                        m.len = 0;
                        m.header_epoch = m.next_epoch;
                        m
                    }
                    None => {
                        let id = sys.next_stream;
                        sys.next_stream += 1;
                        StreamMeta {
                            owner: realm,
                            stream_id: id,
                            header_epoch: 1,
                            next_epoch: 1,
                            epochs: Vec::new(),
                            len: 0,
                        }
                    }
                };
                let header = FileHeader {
                    stream_id: meta.stream_id,
                    epoch: meta.header_epoch,
                }
                .encode();
                sys.streams.insert(path.clone(), meta);
                let w = self.host_call(
                    realm,
                    &header,
                    HostCall::Pwrite {
                        hfd,
                        offset: 0,
                        len: FILE_HEADER_LEN as u64,
                    },
                )?;
                if w.retval != FILE_HEADER_LEN as i64 {
                    return integrity(&path, "short header write");
                }
            }
            return Ok(SyscallReply::ok(
                self.alloc_fd(realm, Fd::Shielded { path, hfd, pos: 0 }),
            ));
        }
        if let Some(name) = path.strip_prefix("/chan/") {
            let channel = self.sys().channels.get(name).cloned();
            if channel.as_ref().is_some_and(|c| c.end_of(realm).is_none()) {
                return Ok(SyscallReply::error(EACCES));
            }
            let r = self.host_call(
                realm,
                &raw,
                HostCall::Open {
                    path_len: len,
                    flags,
                },
            )?;
            if r.retval < 0 {
                return match channel {
                    Some(_) => integrity(&path, format!("host refused the channel ({})", r.retval)),
                    None => Ok(claimed(r.retval)),
                };
            }
            let hfd = r.retval as u64;
            let fd = match channel {
                Some(c) if c.spec.shielded => Fd::Channel {
                    name: name.to_string(),
                    hfd,
                },
                _ => Fd::Socket { hfd },
            };
            return Ok(SyscallReply::ok(self.alloc_fd(realm, fd)));
        }
        let r = self.host_call(
            realm,
            &raw,
            HostCall::Open {
                path_len: len,
                flags,
            },
        )?;
        if r.retval < 0 {
            return Ok(claimed(r.retval));
        }
        Ok(SyscallReply::ok(self.alloc_fd(
            realm,
            Fd::Plain {
                hfd: r.retval as u64,
                pos: 0,
            },
        )))
    }

    fn sys_lseek(
        &mut self,
        realm: RealmId,
        fd: u64,
        offset: i64,
        whence: u64,
    ) -> Svc<SyscallReply> {
        use errno::*;
        let Some(entry) = self.tenant(realm).fds.get(&fd).cloned() else {
            return Ok(SyscallReply::error(if fd <= 2 { EINVAL } else { EBADF }));
        };
        let (cur, end) = match &entry {
            Fd::Plain { hfd, pos } => {
                let end = if whence == 2 {
                    let r = self.host_call(realm, &[], HostCall::Stat { hfd: *hfd })?;
                    r.retval
                } else {
                    0
                };
                (*pos as i64, end)
            }
            Fd::Shielded { path, pos, .. } => {
                let len = self.sys().streams.get(path).map_or(0, |m| m.len);
                (*pos as i64, len as i64)
            }
            _ => return Ok(SyscallReply::error(EINVAL)),
        };
        let new = match whence {
            0 => offset,
            1 => cur + offset,
            2 => end + offset,
            _ => return Ok(SyscallReply::error(EINVAL)),
        };
        if new < 0 {
            return Ok(SyscallReply::error(EINVAL));
        }
        if let Some(Fd::Plain { pos, .. } | Fd::Shielded { pos, .. }) =
            self.tenant(realm).fds.get_mut(&fd)
        {
            *pos = new as u64;
        }
        Ok(SyscallReply::ok(new))
    }

    fn alloc_fd(&mut self, realm: RealmId, fd: Fd) -> i64 {
        let t = self.tenant(realm);
        let n = t.next_fd;
        t.next_fd += 1;
        t.fds.insert(n, fd);
        n as i64
    }

    /// The System Realm reads container bytes from the shared buffer.
    fn system_read(&mut self, ptr: Ipa, len: u64) -> Vec<u8> {
        self.realm_read(SYSTEM_REALM, ptr, len, "service-read")
            .unwrap_or_default()
    }

    /// Writes reply bytes into the Data buffer (clipped to it) and cleans them.
    fn place_reply(&mut self, fwd: &ForwardedRequest, at: Ipa, data: &[u8]) {
        let Some(buf) = fwd.buffer.as_ref() else {
            return;
        };
        let end = buf.va.0 + buf.size;
        if at.0 < buf.va.0 || at.0 >= end {
            return;
        }
        let n = (data.len() as u64).min(end - at.0) as usize;
        if n == 0 {
            return;
        }
        let _ = self.realm_write(SYSTEM_REALM, at, &data[..n], "reply-write");
        self.maint_clean_ipa(
            MaintenanceSite::ReplyClean,
            SYSTEM_REALM,
            at,
            n as u64,
            WorldId::SystemRealm,
        );
    }

    /// Reply built by the System Realm itself from bytes it trusts.
    fn deliver(&mut self, fwd: &ForwardedRequest, ptr: Ipa, data: &[u8]) -> SyscallReply {
        self.place_reply(fwd, ptr, data);
        SyscallReply::data(data.len() as i64, ptr, data.len() as u64)
    }

    /// Reply that carries the host's claims unchanged, for unshielded data.
    fn pass_through(&mut self, fwd: &ForwardedRequest, ptr: Ipa, r: HostReply) -> SyscallReply {
        if r.retval < 0 {
            return claimed(r.retval);
        }
        let bytes = self.host_output(&r, u64::MAX);
        let at = ptr.add(r.out_off);
        self.place_reply(fwd, at, &bytes);
        SyscallReply {
            retval: r.retval,
            out_len: r.out_len,
            out_ptr: Some(at),
            errno: 0,
        }
    }

    fn host_call(&mut self, realm: RealmId, payload: &[u8], call: HostCall) -> Svc<HostReply> {
        let (bounce, va) = {
            let sys = self.sys();
            (sys.bounce.clone(), sys.bounce_va)
        };
        if !payload.is_empty() {
            let n = payload.len().min(BOUNCE_SIZE as usize);
            let _ = self.realm_write(SYSTEM_REALM, va, &payload[..n], "host-request");
            self.maint_clean_ipa(
                MaintenanceSite::HostRequestClean,
                SYSTEM_REALM,
                va,
                n as u64,
                WorldId::SystemRealm,
            );
        }
        let req = HostRequest {
            pid: SystemServices::pid_of(realm),
            call,
        };
        for _ in 0..HOST_ATTEMPTS {
            let World {
                host,
                gs,
                ledger,
                trace,
                ..
            } = self;
            if let Ok(r) = host.dispatch(gs, ledger, trace, &bounce, &req) {
                return Ok(r);
            }
        }
        Err(Abort::Unresponsive)
    }

    /// Reads up to `max` output bytes the host placed in the bounce buffer.
    fn host_output(&mut self, r: &HostReply, max: u64) -> Vec<u8> {
        let va = self.sys().bounce_va;
        if r.out_off >= BOUNCE_SIZE {
            return Vec::new();
        }
        let n = r.out_len.min(BOUNCE_SIZE - r.out_off).min(max);
        if n == 0 {
            return Vec::new();
        }
        let at = va.add(r.out_off);
        self.maint_clean_ipa(
            MaintenanceSite::HostReplyClean,
            SYSTEM_REALM,
            at,
            n,
            WorldId::SystemRealm,
        );
        self.realm_read(SYSTEM_REALM, at, n, "host-reply")
            .unwrap_or_default()
    }

    fn console_emit(&mut self, realm: RealmId, data: &[u8]) -> Svc<()> {
        let skip_seal = self.mutations.has(Flag::SkipSeal);
        let shielded = self.tenant(realm).console.is_some();
        if shielded {
            self.sys().shielded_plaintext.push(data.to_vec());
        }
        let mut records = Vec::new();
        for chunk in data.chunks(BLOCK_SIZE) {
            match self.tenant(realm).console.as_mut() {
                Some(_) if skip_seal => records.push(chunk.to_vec()),
                Some(sealer) => records.push(sealer.seal(chunk)),
                None => records.push(chunk.to_vec()),
            }
        }
        for rec in records {
            let r = self.host_call(
                realm,
                &rec,
                HostCall::ConsoleWrite {
                    len: rec.len() as u64,
                },
            )?;
            if r.retval != rec.len() as i64 {
                return integrity(
                    "console",
                    format!("host accepted {} of {} bytes", r.retval, rec.len()),
                );
            }
        }
        Ok(())
    }

    fn file_key(&mut self, realm: RealmId) -> Key {
        self.tenant(realm).keys.file_key.clone()
    }

    fn read_block(&mut self, realm: RealmId, path: &str, hfd: u64, index: u32) -> Svc<Vec<u8>> {
        let meta = self
            .sys()
            .streams
            .get(path)
            .cloned()
            .expect("stream metadata");
        let r = self.host_call(
            realm,
            &[],
            HostCall::Pread {
                hfd,
                offset: FileHeader::record_offset(index),
                len: FILE_RECORD_LEN as u64,
            },
        )?;
        if r.retval != FILE_RECORD_LEN as i64
            || r.out_len != FILE_RECORD_LEN as u64
            || r.out_off != 0
        {
            return integrity(
                path,
                format!(
                    "block {index}: host returned {} bytes at {}",
                    r.out_len, r.out_off
                ),
            );
        }
        let bytes = self.host_output(&r, FILE_RECORD_LEN as u64);
        let Ok((block, _)) = ShieldedBlock::decode(&bytes) else {
            return integrity(path, format!("block {index}: malformed record"));
        };
        let epoch = meta.epochs.get(index as usize).copied().unwrap_or(0);
        let expected = BlockAddress {
            realm: meta.owner,
            stream: meta.stream_id as u16,
            index,
            epoch,
        };
        if self.mutations.has(Flag::SkipSeal) {
            return Ok(block.ciphertext);
        }
        if block.block_index != index || block.epoch != epoch || block.nonce != expected.nonce() {
            return integrity(path, format!("block {index}: stale or misplaced record"));
        }
        let key = self.file_key(realm);
        match open_block(&key, meta.stream_id as u16, index, &block) {
            Ok(pt) if pt.len() == BLOCK_SIZE => Ok(pt),
            Ok(_) => integrity(path, format!("block {index}: wrong length")),
            Err(_) => integrity(path, format!("block {index}: authentication failure")),
        }
    }

    fn read_shielded(
        &mut self,
        realm: RealmId,
        path: &str,
        hfd: u64,
        pos: u64,
        len: u64,
    ) -> Svc<Vec<u8>> {
        let file_len = self.sys().streams.get(path).map_or(0, |m| m.len);
        let end = (pos + len).min(file_len);
        let mut out = Vec::new();
        let mut at = pos;
        while at < end {
            let index = (at / BLOCK_SIZE as u64) as u32;
            let block = self.read_block(realm, path, hfd, index)?;
            let off = (at % BLOCK_SIZE as u64) as usize;
            let n = ((end - at) as usize).min(BLOCK_SIZE - off);
            out.extend_from_slice(&block[off..off + n]);
            at += n as u64;
        }
        Ok(out)
    }

    fn write_shielded(
        &mut self,
        realm: RealmId,
        path: &str,
        hfd: u64,
        pos: u64,
        data: &[u8],
    ) -> Svc<()> {
        if data.is_empty() {
            return Ok(());
        }
        self.sys().shielded_plaintext.push(data.to_vec());
        let key = self.file_key(realm);
        let skip_seal = self.mutations.has(Flag::SkipSeal);
        let end = pos + data.len() as u64;
        let first = (pos / BLOCK_SIZE as u64) as u32;
        let last = ((end - 1) / BLOCK_SIZE as u64) as u32;
        let existing = self
            .sys()
            .streams
            .get(path)
            .map_or(0, |m| m.epochs.len() as u32);
        // Holes before the first touched block become zero blocks.
        for index in existing.min(first)..=last {
            let mut block = if index < existing {
                self.read_block(realm, path, hfd, index)?
            } else {
                vec![0u8; BLOCK_SIZE]
            };
            let block_start = u64::from(index) * BLOCK_SIZE as u64;
            let lo = pos.max(block_start);
            let hi = end.min(block_start + BLOCK_SIZE as u64);
            if lo < hi {
                block[(lo - block_start) as usize..(hi - block_start) as usize]
                    .copy_from_slice(&data[(lo - pos) as usize..(hi - pos) as usize]);
            }
            let meta = self.sys().streams.get_mut(path).expect("stream metadata");
            let epoch = meta.next_epoch;
            meta.next_epoch += 1;
            let addr = BlockAddress {
                realm: meta.owner,
                stream: meta.stream_id as u16,
                index,
                epoch,
            };
            let sealed = if skip_seal {
                ShieldedBlock {
                    block_index: index,
                    epoch,
                    nonce: addr.nonce(),
                    ciphertext: block,
                    tag: [0; TAG_LEN],
                }
            } else {
                seal_block(&key, addr, &block).expect("block-sized plaintext")
            };
            let rec = sealed.encode();
            let r = self.host_call(
                realm,
                &rec,
                HostCall::Pwrite {
                    hfd,
                    offset: FileHeader::record_offset(index),
                    len: rec.len() as u64,
                },
            )?;
            if r.retval != rec.len() as i64 {
                return integrity(path, format!("block {index}: short write"));
            }
            let meta = self.sys().streams.get_mut(path).expect("stream metadata");
            if meta.epochs.len() <= index as usize {
                meta.epochs.resize(index as usize + 1, 0);
            }
            meta.epochs[index as usize] = epoch;
        }
        let meta = self.sys().streams.get_mut(path).expect("stream metadata");
        meta.len = meta.len.max(end);
        Ok(())
    }

    fn channel_key(&self, spec: &ChannelSpec) -> Key {
        let m = |r: RealmId| {
            self.descriptor(r)
                .and_then(|d| d.measurement)
                .unwrap_or([0; 32])
        };
        let digest = Sha256::digest(spec.name.as_bytes());
        let pair = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]);
        channel_session_key(&self.provisioning, &m(spec.a), &m(spec.b), pair)
    }

    fn channel_send(&mut self, realm: RealmId, name: &str, hfd: u64, data: &[u8]) -> Svc<()> {
        let ch = self
            .sys()
            .channels
            .get(name)
            .cloned()
            .expect("registered channel");
        let end = ch.end_of(realm).expect("endpoint checked at open");
        let key = self.channel_key(&ch.spec);
        let seq = ch.send_seq[end];
        let addr = BlockAddress {
            realm,
            stream: CHANNEL_STREAM_BASE + end as u16,
            index: seq,
            epoch: 0,
        };
        self.sys().shielded_plaintext.push(data.to_vec());
        let rec = if self.mutations.has(Flag::SkipSeal) {
            ShieldedBlock {
                block_index: seq,
                epoch: 0,
                nonce: addr.nonce(),
                ciphertext: data.to_vec(),
                tag: [0; TAG_LEN],
            }
        } else {
            seal_block(&key, addr, data).expect("message fits a block")
        }
        .encode();
        let r = self.host_call(
            realm,
            &rec,
            HostCall::SockSend {
                hfd,
                len: rec.len() as u64,
            },
        )?;
        if r.retval != rec.len() as i64 {
            return integrity(&format!("/chan/{name}"), "short send");
        }
        self.sys().channels.get_mut(name).expect("channel").send_seq[end] += 1;
        Ok(())
    }

    fn channel_recv(&mut self, realm: RealmId, name: &str, hfd: u64, len: u64) -> Svc<Vec<u8>> {
        let target = format!("/chan/{name}");
        let ch = self
            .sys()
            .channels
            .get(name)
            .cloned()
            .expect("registered channel");
        let end = ch.end_of(realm).expect("endpoint checked at open");
        let peer_end = 1 - end;
        let peer = if end == 0 { ch.spec.b } else { ch.spec.a };
        let r = self.host_call(
            realm,
            &[],
            HostCall::SockRecv {
                hfd,
                len: FILE_RECORD_LEN as u64,
            },
        )?;
        if r.retval == -errno::EAGAIN {
            return Err(Abort::Deferred);
        }
        if r.retval < 0 || r.out_len != r.retval as u64 || r.out_off != 0 {
            return integrity(&target, format!("malformed receive reply {r:?}"));
        }
        let bytes = self.host_output(&r, FILE_RECORD_LEN as u64);
        let Ok((block, _)) = ShieldedBlock::decode(&bytes) else {
            return integrity(&target, "malformed message");
        };
        let seq = ch.recv_seq[end];
        let stream = CHANNEL_STREAM_BASE + peer_end as u16;
        let expected = BlockAddress {
            realm: peer,
            stream,
            index: seq,
            epoch: 0,
        };
        let mut pt = if self.mutations.has(Flag::SkipSeal) {
            block.ciphertext
        } else {
            if block.block_index != seq || block.epoch != 0 || block.nonce != expected.nonce() {
                return integrity(&target, format!("message {seq}: replayed or reordered"));
            }
            let key = self.channel_key(&ch.spec);
            match open_block(&key, stream, seq, &block) {
                Ok(pt) => pt,
                Err(_) => {
                    return integrity(&target, format!("message {seq}: authentication failure"))
                }
            }
        };
        self.sys().channels.get_mut(name).expect("channel").recv_seq[end] += 1;
        pt.truncate(len as usize);
        Ok(pt)
    }
}

/// Checks a host-held shielded file: header, length and every record.
pub fn check_stream_file(
    key: &Key,
    meta: &StreamMeta,
    file: &[u8],
    skip_seal: bool,
) -> Result<(), String> {
    let header = FileHeader::decode(file).map_err(|e| format!("header: {e}"))?;
    if header.stream_id != meta.stream_id || header.epoch != meta.header_epoch {
        return Err("header does not match the stream".into());
    }
    let blocks = meta.epochs.len() as u32;
    if (file.len() as u64) < FileHeader::record_offset(blocks) {
        return Err(format!("{} bytes, expected {blocks} records", file.len()));
    }
    for (index, &epoch) in meta.epochs.iter().enumerate() {
        let index = index as u32;
        let at = FileHeader::record_offset(index) as usize;
        let (block, _) = ShieldedBlock::decode(&file[at..at + FILE_RECORD_LEN])
            .map_err(|e| format!("block {index}: {e}"))?;
        let addr = BlockAddress {
            realm: meta.owner,
            stream: meta.stream_id as u16,
            index,
            epoch,
        };
        if block.block_index != index || block.epoch != epoch || block.nonce != addr.nonce() {
            return Err(format!("block {index}: stale or misplaced record"));
        }
        if !skip_seal {
            open_block(key, meta.stream_id as u16, index, &block)
                .map_err(|_| format!("block {index}: authentication failure"))?;
        }
    }
    Ok(())
}

/// A reply whose return value is whatever the host claimed.
fn claimed(retval: i64) -> SyscallReply {
    if retval < 0 {
        SyscallReply {
            retval,
            out_len: 0,
            out_ptr: None,
            errno: -retval,
        }
    } else {
        SyscallReply::ok(retval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpu::{BufferKind, Direction};
    use crate::granule::GranuleId;

    fn fwd(number: Sysno, ptr: u64, len: u64) -> ForwardedRequest {
        let cause = TrapCause::Syscall {
            number,
            args: [3, ptr, len, 0, 0, 0],
        };
        ForwardedRequest {
            realm: RealmId(1),
            cause: cause.clone(),
            original: cause,
            redirected: None,
            buffer: Some(buf()),
        }
    }

    fn buf() -> SharedBufferRecord {
        SharedBufferRecord {
            realm: RealmId(1),
            kind: BufferKind::Data,
            va: Ipa(0x1000),
            pa: (GranuleId(9), 0),
            size: 4096,
            granules: vec![GranuleId(9)],
        }
    }

    #[test]
    fn verdicts_follow_the_rule_order() {
        let f = fwd(Sysno::Read, 0x1000, 64);
        let b = buf();
        let ok = SyscallReply::data(10, Ipa(0x1000), 10);
        assert_eq!(verify_result(&ok, Some(&b), &f), Verdict::Valid);
        let huge = SyscallReply::data(8192, Ipa(0x1000), 8192);
        assert_eq!(
            verify_result(&huge, Some(&b), &f),
            Verdict::Rejected(RejectReason::SizeExceedsBuffer)
        );
        let over = SyscallReply::data(65, Ipa(0x1000), 65);
        assert_eq!(
            verify_result(&over, Some(&b), &f),
            Verdict::Rejected(RejectReason::ExceedsRequest)
        );
        let lie = SyscallReply::data(11, Ipa(0x1000), 10);
        assert_eq!(
            verify_result(&lie, Some(&b), &f),
            Verdict::Rejected(RejectReason::InconsistentRetval)
        );
        let outside = SyscallReply::data(10, Ipa(0x1ff8), 10);
        assert_eq!(
            verify_result(&outside, Some(&b), &f),
            Verdict::Rejected(RejectReason::OutsideBuffer)
        );
        let moved = SyscallReply::data(10, Ipa(0x1010), 10);
        assert_eq!(
            verify_result(&moved, Some(&b), &f),
            Verdict::Rejected(RejectReason::PointerMismatch)
        );
        assert_eq!(
            verify_result(&SyscallReply::error(errno::EIO), Some(&b), &f),
            Verdict::Valid
        );
    }

    #[test]
    fn write_like_retval_is_bounded_by_the_request() {
        let f = fwd(Sysno::Write, 0x1000, 5);
        assert_eq!(
            verify_result(&SyscallReply::ok(5), Some(&buf()), &f),
            Verdict::Valid
        );
        assert_eq!(
            verify_result(&SyscallReply::ok(6), Some(&buf()), &f),
            Verdict::Rejected(RejectReason::InconsistentRetval)
        );
        assert_eq!(
            Sysno::Write.pointer_arg().map(|p| p.dir),
            Some(Direction::In)
        );
    }
}
