// SPDX-License-Identifier: Apache-2.0

//! The simulated vCPU: register context and the tiny instruction set that
//! container workloads are written in.
//!
//! A program is a list of [`Instr`]. Instruction `i` lives at
//! `entry + 4 * i`, so saved program counters are ordinary IPAs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rtt::Ipa;

pub const NUM_REGS: usize = 31;
pub const INSTR_BYTES: u64 = 4;
/// Register holding syscall results on reentry.
pub const RESULT_REG: usize = 0;
/// Register carrying the syscall number at the trap.
pub const SYSNO_REG: usize = 8;
/// First register used for named program variables.
pub const FIRST_VAR_REG: u8 = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    Data,
    SignalStack,
}

impl fmt::Display for BufferKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BufferKind::Data => "data",
            BufferKind::SignalStack => "signal-stack",
        })
    }
}

/// The mediated syscall subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sysno {
    Open,
    Close,
    Read,
    Write,
    Lseek,
    SockSend,
    SockRecv,
    Getpid,
    ClockRead,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Bytes flow from the container to the service.
    In,
    /// Bytes flow from the service back to the container.
    Out,
}

/// Which argument slots carry a buffer pointer and its length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointerArg {
    pub ptr: usize,
    pub len: usize,
    pub dir: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallClass {
    ReadLike,
    WriteLike,
    Other,
}

impl Sysno {
    pub const ALL: [Sysno; 10] = [
        Sysno::Open,
        Sysno::Close,
        Sysno::Read,
        Sysno::Write,
        Sysno::Lseek,
        Sysno::SockSend,
        Sysno::SockRecv,
        Sysno::Getpid,
        Sysno::ClockRead,
        Sysno::Exit,
    ];

    /// AArch64 Linux numbering.
    pub fn number(self) -> u64 {
        match self {
            Sysno::Open => 56,
            Sysno::Close => 57,
            Sysno::Lseek => 62,
            Sysno::Read => 63,
            Sysno::Write => 64,
            Sysno::Exit => 93,
            Sysno::ClockRead => 113,
            Sysno::Getpid => 172,
            Sysno::SockSend => 206,
            Sysno::SockRecv => 207,
        }
    }

    pub fn from_number(n: u64) -> Option<Sysno> {
        Self::ALL.into_iter().find(|s| s.number() == n)
    }

    pub fn name(self) -> &'static str {
        match self {
            Sysno::Open => "open",
            Sysno::Close => "close",
            Sysno::Read => "read",
            Sysno::Write => "write",
            Sysno::Lseek => "lseek",
            Sysno::SockSend => "sock_send",
            Sysno::SockRecv => "sock_recv",
            Sysno::Getpid => "getpid",
            Sysno::ClockRead => "clock_read",
            Sysno::Exit => "exit",
        }
    }

    pub fn pointer_arg(self) -> Option<PointerArg> {
        let (ptr, len, dir) = match self {
            Sysno::Open => (0, 1, Direction::In),
            Sysno::Read | Sysno::SockRecv => (1, 2, Direction::Out),
            Sysno::Write | Sysno::SockSend => (1, 2, Direction::In),
            _ => return None,
        };
        Some(PointerArg { ptr, len, dir })
    }

    pub fn class(self) -> CallClass {
        match self {
            Sysno::Read | Sysno::SockRecv => CallClass::ReadLike,
            Sysno::Write | Sysno::SockSend => CallClass::WriteLike,
            _ => CallClass::Other,
        }
    }
}

impl fmt::Display for Sysno {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arg {
    Imm(u64),
    Reg(u8),
    /// Address relative to the container's window base.
    Ptr(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "i", rename_all = "snake_case")]
pub enum Instr {
    Store {
        offset: u64,
        #[serde(with = "hex_bytes")]
        data: Vec<u8>,
    },
    Load {
        offset: u64,
        len: u64,
    },
    Mov {
        reg: u8,
        value: u64,
    },
    Copy {
        dst: u8,
        src: u8,
    },
    Syscall {
        number: Sysno,
        args: Vec<Arg>,
    },
    Irq {
        line: u32,
    },
    Exit {
        code: i64,
    },
    Share {
        kind: BufferKind,
        offset: u64,
        size: u64,
    },
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

pub fn encode_program(program: &[Instr]) -> Vec<u8> {
    serde_json::to_vec(program).expect("program serializes")
}

pub fn decode_program(bytes: &[u8]) -> Result<Vec<Instr>, serde_json::Error> {
    serde_json::from_slice(bytes)
}

#[derive(Clone, PartialEq, Eq)]
pub struct CpuContext {
    pub pc: Ipa,
    pub sp: Ipa,
    pub regs: [u64; NUM_REGS],
    pub ttbr0: u64,
    pub vbar: u64,
}

impl CpuContext {
    pub fn new(pc: Ipa, sp: Ipa, ttbr0: u64, vbar: u64) -> Self {
        Self {
            pc,
            sp,
            regs: [0; NUM_REGS],
            ttbr0,
            vbar,
        }
    }
}

impl fmt::Debug for CpuContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let live: Vec<_> = self
            .regs
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(|(i, v)| format!("x{i}={v:#x}"))
            .collect();
        write!(
            f,
            "CpuContext {{ pc: {}, sp: {}, ttbr0: {:#x}, vbar: {:#x}, regs: [{}] }}",
            self.pc,
            self.sp,
            self.ttbr0,
            self.vbar,
            live.join(" ")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for s in Sysno::ALL {
            assert_eq!(Sysno::from_number(s.number()), Some(s));
        }
        assert_eq!(Sysno::from_number(0), None);
    }

    #[test]
    fn program_encoding_is_stable() {
        let p = vec![
            Instr::Store {
                offset: 0x4000,
                data: b"hi".to_vec(),
            },
            Instr::Syscall {
                number: Sysno::Write,
                args: vec![Arg::Imm(1), Arg::Ptr(0x4000), Arg::Imm(2)],
            },
            Instr::Exit { code: 0 },
        ];
        let enc = encode_program(&p);
        assert_eq!(
            std::str::from_utf8(&enc).unwrap(),
            r#"[{"i":"store","offset":16384,"data":"6869"},{"i":"syscall","number":"write","args":[{"imm":1},{"ptr":16384},{"imm":2}]},{"i":"exit","code":0}]"#
        );
        assert_eq!(decode_program(&enc).unwrap(), p);
    }

    #[test]
    fn pointer_slots() {
        assert_eq!(Sysno::Getpid.pointer_arg(), None);
        let w = Sysno::Write.pointer_arg().unwrap();
        assert_eq!((w.ptr, w.len, w.dir), (1, 2, Direction::In));
        assert_eq!(Sysno::SockRecv.class(), CallClass::ReadLike);
    }
}
