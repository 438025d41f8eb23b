// SPDX-License-Identifier: Apache-2.0

//! Scenario documents and the built-in corpus.

use serde::{Deserialize, Serialize};

use crate::cpu::{encode_program, Arg, BufferKind, Instr, Sysno, FIRST_VAR_REG, RESULT_REG};
use crate::granule::GRANULE_SIZE;
use crate::host::{AdversaryAction, ScriptedAction, StoreTarget, O_CREAT, O_TRUNC};
use crate::rmm::{Mutation, Mutations, BOUNCE_SIZE};

use super::HarnessError;

fn default_quantum() -> u32 {
    1
}

fn default_max_turns() -> u64 {
    2000
}

fn default_system_granules() -> usize {
    4
}

fn default_stack() -> u64 {
    GRANULE_SIZE as u64
}

fn default_buffer_cap() -> u64 {
    BOUNCE_SIZE
}

/// A complete, deterministic run description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub pool_size: usize,
    #[serde(default = "default_system_granules")]
    pub system_granules: usize,
    /// Scheduling turns a container gets per round.
    #[serde(default = "default_quantum")]
    pub quantum: u32,
    #[serde(default = "default_max_turns")]
    pub max_turns: u64,
    /// Have the host dirty every free granule before setup.
    #[serde(default)]
    pub host_scribble: bool,
    #[serde(default)]
    pub mutations: Vec<String>,
    pub containers: Vec<ContainerConfig>,
    #[serde(default)]
    pub channels: Vec<ChannelConfig>,
    #[serde(default)]
    pub adversary: Vec<ScriptedAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerConfig {
    pub name: String,
    pub granules: usize,
    #[serde(default)]
    pub entry: u64,
    #[serde(default = "default_stack")]
    pub stack_size: u64,
    #[serde(default = "default_buffer_cap")]
    pub max_shared_buffer: u64,
    /// Pin the image hash in the creation policy.
    #[serde(default)]
    pub pin_measurement: bool,
    #[serde(default)]
    pub shielded_console: bool,
    pub program: Vec<Instr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub name: String,
    pub a: String,
    pub b: String,
    #[serde(default = "yes")]
    pub shielded: bool,
}

fn yes() -> bool {
    true
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn mutation_set(&self) -> Result<Mutations, HarnessError> {
        self.mutations
            .iter()
            .map(|m| m.parse::<Mutation>().map_err(HarnessError::Validation))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        if self.containers.is_empty() {
            return bad("a scenario needs at least one container".into());
        }
        if self.quantum == 0 {
            return bad("quantum must be at least 1".into());
        }
        self.mutation_set()?;
        let mut names = std::collections::BTreeSet::new();
        for c in &self.containers {
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate container name `{}`", c.name));
            }
            if c.granules < 2 {
                return bad(format!("container `{}` needs at least 2 granules", c.name));
            }
        }
        for ch in &self.channels {
            for end in [&ch.a, &ch.b] {
                if !names.contains(end.as_str()) {
                    return bad(format!(
                        "channel `{}` names unknown container `{end}`",
                        ch.name
                    ));
                }
            }
            if ch.a == ch.b {
                return bad(format!(
                    "channel `{}` connects a container to itself",
                    ch.name
                ));
            }
        }
        Ok(())
    }

    pub fn container_index(&self, name: &str) -> Option<usize> {
        self.containers.iter().position(|c| c.name == name)
    }
}

/// Fixed container memory layout used by the corpus programs.
pub mod layout {
    /// Image bytes live below this offset.
    pub const IMAGE_LIMIT: u64 = 0x6000;
    pub const BUFFER: u64 = 0x6000;
    pub const BUFFER_SIZE: u64 = 0x2000;
    pub const HEAP: u64 = 0x8000;
    /// Data granules that fit the layout with a one-page stack.
    pub const GRANULES: usize = 16;
}

/// Small assembler for workload programs.
#[derive(Debug, Clone, Default)]
pub struct ProgramBuilder {
    instrs: Vec<Instr>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, i: Instr) -> Self {
        self.instrs.push(i);
        self
    }

    pub fn share_data(self, offset: u64, size: u64) -> Self {
        self.push(Instr::Share {
            kind: BufferKind::Data,
            offset,
            size,
        })
    }

    pub fn store(self, offset: u64, data: &[u8]) -> Self {
        self.push(Instr::Store {
            offset,
            data: data.to_vec(),
        })
    }

    pub fn load(self, offset: u64, len: u64) -> Self {
        self.push(Instr::Load { offset, len })
    }

    pub fn syscall(self, number: Sysno, args: Vec<Arg>) -> Self {
        self.push(Instr::Syscall { number, args })
    }

    /// Saves the last return value in variable register `var`.
    pub fn keep(self, var: u8) -> Self {
        self.push(Instr::Copy {
            dst: FIRST_VAR_REG + var,
            src: RESULT_REG as u8,
        })
    }

    pub fn write(self, fd: Arg, offset: u64, len: u64) -> Self {
        self.syscall(Sysno::Write, vec![fd, Arg::Ptr(offset), Arg::Imm(len)])
    }

    pub fn read(self, fd: Arg, offset: u64, len: u64) -> Self {
        self.syscall(Sysno::Read, vec![fd, Arg::Ptr(offset), Arg::Imm(len)])
    }

    /// Stores `path` at `scratch` and opens it, keeping the fd in `var`.
    pub fn open(self, scratch: u64, path: &str, flags: u64, var: u8) -> Self {
        self.store(scratch, path.as_bytes())
            .syscall(
                Sysno::Open,
                vec![
                    Arg::Ptr(scratch),
                    Arg::Imm(path.len() as u64),
                    Arg::Imm(flags),
                ],
            )
            .keep(var)
    }

    pub fn lseek(self, fd: Arg, offset: u64, whence: u64) -> Self {
        self.syscall(Sysno::Lseek, vec![fd, Arg::Imm(offset), Arg::Imm(whence)])
    }

    pub fn exit(self, code: i64) -> Self {
        self.push(Instr::Exit { code })
    }

    pub fn build(self) -> Vec<Instr> {
        let len = encode_program(&self.instrs).len() as u64;
        assert!(
            len <= layout::IMAGE_LIMIT,
            "program image of {len} bytes overflows the layout"
        );
        self.instrs
    }
}

pub fn var(v: u8) -> Arg {
    Arg::Reg(FIRST_VAR_REG + v)
}

/// Deterministic non-repeating filler so plaintext windows are recognisable.
pub fn pattern(tag: &str, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut i = 0u32;
    while out.len() < len {
        out.extend_from_slice(format!("<{tag}:{i:06}>").as_bytes());
        i += 1;
    }
    out.truncate(len);
    out
}

pub fn container(name: &str, program: Vec<Instr>) -> ContainerConfig {
    ContainerConfig {
        name: name.into(),
        granules: layout::GRANULES,
        entry: 0,
        stack_size: default_stack(),
        max_shared_buffer: BOUNCE_SIZE,
        pin_measurement: true,
        shielded_console: false,
        program,
    }
}

/// A scenario with default settings and a pool sized for `containers`.
pub fn base(name: &str, containers: Vec<ContainerConfig>) -> Scenario {
    Scenario {
        name: name.into(),
        seed: 7,
        pool_size: 96 + 48 * containers.len(),
        system_granules: default_system_granules(),
        quantum: 1,
        max_turns: default_max_turns(),
        host_scribble: false,
        mutations: Vec::new(),
        containers,
        channels: Vec::new(),
        adversary: Vec::new(),
    }
}

use layout::{BUFFER, BUFFER_SIZE, HEAP};

/// One container that prints a line on the console and exits.
pub fn echo() -> Scenario {
    let p = ProgramBuilder::new()
        .share_data(BUFFER, BUFFER_SIZE)
        .store(HEAP, b"hello from a container realm\n")
        .write(Arg::Imm(1), HEAP, 29)
        .exit(0)
        .build();
    base("echo", vec![container("echo", p)])
}

/// `k` getpid calls, for domain-switch accounting.
pub fn getpid_loop(k: usize) -> Scenario {
    let mut b = ProgramBuilder::new();
    for _ in 0..k {
        b = b.syscall(Sysno::Getpid, vec![]);
    }
    base(
        &format!("getpid-{k}"),
        vec![container("worker", b.exit(0).build())],
    )
}

/// Plain and shielded files: write, overwrite, seek and read back.
pub fn files() -> Scenario {
    let plain = pattern("plain", 300);
    let secret = pattern("secret-file", 6000);
    let fix = pattern("rewrite", 100);
    let p = ProgramBuilder::new()
        .share_data(BUFFER, BUFFER_SIZE)
        .open(HEAP, "/data/log", O_CREAT, 0)
        .store(HEAP + 0x100, &plain)
        .write(var(0), HEAP + 0x100, plain.len() as u64)
        .lseek(var(0), 0, 0)
        .read(var(0), BUFFER, plain.len() as u64)
        .load(BUFFER, plain.len() as u64)
        .open(HEAP, "/secure/notes", O_CREAT | O_TRUNC, 1)
        .store(HEAP + 0x400, &secret)
        .write(var(1), HEAP + 0x400, secret.len() as u64)
        .lseek(var(1), 10, 0)
        .store(HEAP + 0x400, &fix)
        .write(var(1), HEAP + 0x400, fix.len() as u64)
        .lseek(var(1), 0, 0)
        .read(var(1), HEAP + 0x2000, secret.len() as u64)
        .load(HEAP + 0x2000, secret.len() as u64)
        .syscall(Sysno::Close, vec![var(1)])
        .syscall(Sysno::Close, vec![var(0)])
        .exit(0)
        .build();
    base("files", vec![container("files", p)])
}

/// Two containers talking over a shielded channel, each with a shielded
/// console and a shielded file.
pub fn channels() -> Scenario {
    let ping = pattern("ping", 700);
    let pong = pattern("pong", 900);
    let a = ProgramBuilder::new()
        .share_data(BUFFER, BUFFER_SIZE)
        .open(HEAP, "/chan/pipe", 0, 0)
        .store(HEAP + 0x100, &ping)
        .syscall(
            Sysno::SockSend,
            vec![var(0), Arg::Ptr(HEAP + 0x100), Arg::Imm(ping.len() as u64)],
        )
        .syscall(
            Sysno::SockRecv,
            vec![var(0), Arg::Ptr(HEAP + 0x1000), Arg::Imm(pong.len() as u64)],
        )
        .load(HEAP + 0x1000, pong.len() as u64)
        .store(HEAP + 0x100, b"A done\n")
        .write(Arg::Imm(1), HEAP + 0x100, 7)
        .exit(0)
        .build();
    let b = ProgramBuilder::new()
        .share_data(BUFFER, BUFFER_SIZE)
        .open(HEAP, "/chan/pipe", 0, 0)
        .syscall(
            Sysno::SockRecv,
            vec![var(0), Arg::Ptr(HEAP + 0x1000), Arg::Imm(ping.len() as u64)],
        )
        .load(HEAP + 0x1000, ping.len() as u64)
        .store(HEAP + 0x100, &pong)
        .syscall(
            Sysno::SockSend,
            vec![var(0), Arg::Ptr(HEAP + 0x100), Arg::Imm(pong.len() as u64)],
        )
        .store(HEAP + 0x100, b"B done\n")
        .write(Arg::Imm(1), HEAP + 0x100, 7)
        .exit(0)
        .build();
    let mut ca = container("alpha", a);
    let mut cb = container("beta", b);
    ca.shielded_console = true;
    cb.shielded_console = true;
    let mut s = base("channels", vec![ca, cb]);
    s.channels.push(ChannelConfig {
        name: "pipe".into(),
        a: "alpha".into(),
        b: "beta".into(),
        shielded: true,
    });
    s
}

/// Touches every maintenance site at least once, on a pool the host has
/// dirtied beforehand.
pub fn maintenance() -> Scenario {
    let data = pattern("maint", 512);
    let p = ProgramBuilder::new()
        // Fresh heap: only clean if delegation cleaned the host's lines.
        .load(HEAP + 0x3000, 64)
        .share_data(BUFFER, BUFFER_SIZE)
        .open(HEAP, "/data/m", O_CREAT, 0)
        // Private-pointer write: redirect copy in, forwarded to the host.
        .store(HEAP + 0x100, &data)
        .write(var(0), HEAP + 0x100, data.len() as u64)
        .lseek(var(0), 0, 0)
        // Private-pointer read: copied back into private memory.
        .read(var(0), HEAP + 0x1000, data.len() as u64)
        .load(HEAP + 0x1000, data.len() as u64)
        .lseek(var(0), 0, 0)
        // Buffer-pointer read: the System Realm writes the reply in place.
        .read(var(0), BUFFER + 0x100, data.len() as u64)
        .load(BUFFER + 0x100, data.len() as u64)
        .exit(0)
        .build();
    let mut s = base("maintenance", vec![container("maint", p)]);
    s.host_scribble = true;
    s
}

/// The host probes every granule once the container is running.
pub fn probe_sweep() -> Scenario {
    let mut s = echo();
    s.name = "probe-sweep".into();
    for access in [
        crate::granule::AccessKind::Read,
        crate::granule::AccessKind::Write,
        crate::granule::AccessKind::Exec,
    ] {
        s.adversary.push(ScriptedAction {
            at_turn: 0,
            action: AdversaryAction::ProbeGranule {
                granule: None,
                access,
            },
        });
    }
    s
}

/// Shielded-only workload used as the adversary baseline: two tenants with
/// shielded files, a shielded channel and shielded consoles.
pub fn shielded_pair() -> Scenario {
    let mut s = channels();
    s.name = "shielded-pair".into();
    for (i, c) in s.containers.iter_mut().enumerate() {
        let tag = if i == 0 { "alpha" } else { "beta" };
        let body = pattern(&format!("{tag}-vault"), 5000);
        let patch = pattern(&format!("{tag}-patch"), 64);
        let path = format!("/secure/{tag}");
        // Reuse the channel program, then add a file round trip before exit.
        let mut prog: Vec<Instr> = c.program.clone();
        prog.pop();
        let extra = ProgramBuilder::new()
            .syscall(Sysno::Getpid, vec![])
            .open(HEAP, &path, O_CREAT, 2)
            .store(HEAP + 0x2000, &body)
            .write(var(2), HEAP + 0x2000, body.len() as u64)
            .lseek(var(2), 4000, 0)
            .store(HEAP + 0x2000, &patch)
            .write(var(2), HEAP + 0x2000, patch.len() as u64)
            .lseek(var(2), 0, 0)
            .read(var(2), HEAP + 0x4000, body.len() as u64)
            .load(HEAP + 0x4000, body.len() as u64)
            .exit(0)
            .build();
        prog.extend(extra);
        c.program = prog;
    }
    s
}

/// Scenarios every audit runs over.
pub fn corpus() -> Vec<Scenario> {
    vec![
        echo(),
        files(),
        channels(),
        maintenance(),
        probe_sweep(),
        shielded_pair(),
    ]
}

/// Looks up a built-in scenario by name; `getpid-<k>` builds a loop of `k`
/// calls.
pub fn builtin(name: &str) -> Option<Scenario> {
    if let Some(k) = name.strip_prefix("getpid-") {
        return k.parse().ok().filter(|&k| k <= 500).map(getpid_loop);
    }
    corpus().into_iter().find(|s| s.name == name)
}

/// Host-held stores of [`shielded_pair`] that an adversary may target.
pub fn shielded_targets() -> Vec<StoreTarget> {
    vec![
        StoreTarget::File("/secure/alpha".into()),
        StoreTarget::File("/secure/beta".into()),
        StoreTarget::Channel("pipe".into()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trips_through_json() {
        for s in corpus() {
            let back = Scenario::from_json(&s.to_json()).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn validation_rejects_bad_channels() {
        let mut s = channels();
        s.channels[0].b = "nobody".into();
        assert!(matches!(s.validate(), Err(HarnessError::Validation(_))));
    }

    #[test]
    fn unknown_fields_are_parse_errors() {
        let text = echo().to_json().replacen("\"seed\"", "\"sed\"", 1);
        assert!(matches!(
            Scenario::from_json(&text),
            Err(HarnessError::Parse(_))
        ));
    }
}
