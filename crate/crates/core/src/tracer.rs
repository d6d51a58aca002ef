//! Reference interpreter for the assembly subset. Executes a program and
//! records, per dynamic instruction, the registers it read and the memory it
//! touched.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;
use smallvec::SmallVec;
use thiserror::Error;

use crate::asm::{Gpr, Instruction, Loc, MemExpr, Mnemonic, Operand, Program, Width};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("fell off program at dynamic instruction {seq}: pc {pc} out of range")]
    FellOff { seq: u64, pc: usize },
    #[error("dynamic instruction {seq}: misaligned {bytes}-byte access at {addr:#x}")]
    Misaligned { seq: u64, addr: u64, bytes: u32 },
    #[error("max_insts must be positive")]
    ZeroBudget,
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace record {record}: {msg}")]
    Malformed { record: usize, msg: String },
    #[error("trace truncated after record {after}: missing end marker")]
    Truncated { after: usize },
    #[error("trace record {seq} is inconsistent with the program: {msg}")]
    Inconsistent { seq: u64, msg: String },
    #[error("trace was recorded for program {found:#018x}, expected {expected:#018x}")]
    ProgramMismatch { expected: u64, found: u64 },
    #[error("init file: {0}")]
    Init(String),
}

pub const FLAG_ZF: u8 = 1;
pub const FLAG_SF: u8 = 2;
pub const FLAG_OF: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub pc: usize,
    pub regs: [u64; 16],
    /// ZF | SF << 1 | OF << 2
    pub flags: u8,
    /// Word-granular memory keyed by 8-byte aligned address. Missing words
    /// read as zero.
    pub memory: HashMap<u64, u64>,
}

impl MachineState {
    /// All-zero registers, memory preloaded from the program's data section.
    pub fn for_program(p: &Program) -> Self {
        let mut s = MachineState {
            pc: p.entry,
            regs: [0; 16],
            flags: 0,
            memory: HashMap::new(),
        };
        for &(a, w) in &p.data {
            s.memory.insert(a, w);
        }
        s
    }

    pub fn reg(&self, g: Gpr) -> u64 {
        self.regs[g.index()]
    }

    pub fn set_reg(&mut self, g: Gpr, v: u64) {
        self.regs[g.index()] = v;
    }

    pub fn read_word(&self, addr: u64) -> u64 {
        self.memory.get(&(addr & !7)).copied().unwrap_or(0)
    }
}

/// Initial register/memory state file:
///
/// ```toml
/// [registers]
/// rbx = 4096
/// rsi = "0x2000"
///
/// [memory]
/// "0x1000" = 7
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InitState {
    pub regs: BTreeMap<Gpr, u64>,
    pub memory: BTreeMap<u64, u64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IntOrHex {
    Int(i64),
    Text(String),
}

impl IntOrHex {
    fn value(&self) -> Result<u64, TraceError> {
        match self {
            IntOrHex::Int(v) => Ok(*v as u64),
            IntOrHex::Text(s) => parse_u64(s).ok_or_else(|| TraceError::Init(format!("bad number `{s}`"))),
        }
    }
}

fn parse_u64(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(h) = s.strip_prefix("0x") {
        u64::from_str_radix(h, 16).ok()
    } else if let Some(d) = s.strip_prefix('-') {
        d.parse::<u64>().ok().map(|v| v.wrapping_neg())
    } else {
        s.parse().ok()
    }
}

#[derive(Deserialize)]
struct InitFile {
    #[serde(default)]
    registers: BTreeMap<String, IntOrHex>,
    #[serde(default)]
    memory: BTreeMap<String, IntOrHex>,
}

impl InitState {
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let f: InitFile = toml::from_str(text).map_err(|e| TraceError::Init(e.to_string()))?;
        let mut out = InitState::default();
        for (name, v) in f.registers {
            let g = Gpr::from_name64(&name)
                .ok_or_else(|| TraceError::Init(format!("unknown register `{name}`")))?;
            out.regs.insert(g, v.value()?);
        }
        for (addr, v) in f.memory {
            let a = parse_u64(&addr).ok_or_else(|| TraceError::Init(format!("bad address `{addr}`")))?;
            if a % 8 != 0 {
                return Err(TraceError::Init(format!("address {a:#x} is not 8-byte aligned")));
            }
            out.memory.insert(a, v.value()?);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let mut s = String::from("[registers]\n");
        for (g, v) in &self.regs {
            let _ = writeln!(s, "{} = \"{v:#x}\"", g.name64());
        }
        s.push_str("\n[memory]\n");
        for (a, v) in &self.memory {
            let _ = writeln!(s, "\"{a:#x}\" = \"{v:#x}\"");
        }
        s
    }

    pub fn machine_state(&self, p: &Program) -> MachineState {
        let mut s = MachineState::for_program(p);
        for (&g, &v) in &self.regs {
            s.set_reg(g, v);
        }
        for (&a, &v) in &self.memory {
            s.memory.insert(a, v);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefKind {
    Load,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub kind: RefKind,
    pub addr: u64,
    pub data: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: u64,
    pub inst_index: u32,
    /// Values of the locations the instruction reads, before it executes.
    pub regs: SmallVec<[(Loc, u64); 3]>,
    pub mem: SmallVec<[MemRef; 1]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub program_hash: u64,
    pub init_regs: [u64; 16],
    pub init_flags: u8,
    pub records: Vec<TraceRecord>,
    /// Execution stopped at the instruction budget rather than `halt`.
    pub truncated: bool,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All memory references in execution order, tagged with the dynamic
    /// instruction that issued them.
    pub fn memory_refs(&self) -> impl Iterator<Item = (u64, &MemRef)> {
        self.records
            .iter()
            .flat_map(|r| r.mem.iter().map(move |m| (r.seq, m)))
    }
}

enum Control {
    Next,
    Jump(usize),
    Halt,
}

trait MemPort {
    fn load(&mut self, addr: u64, width: Width) -> Result<u64, TraceError>;
    fn store(&mut self, addr: u64, width: Width, value: u64) -> Result<(), TraceError>;
}

fn check_aligned(seq: u64, addr: u64, width: Width) -> Result<(), TraceError> {
    let bytes = width.bits() / 8;
    if addr % bytes as u64 != 0 {
        return Err(TraceError::Misaligned { seq, addr, bytes });
    }
    Ok(())
}

struct LiveMemory<'a> {
    seq: u64,
    memory: &'a mut HashMap<u64, u64>,
    log: &'a mut SmallVec<[MemRef; 1]>,
}

impl MemPort for LiveMemory<'_> {
    fn load(&mut self, addr: u64, width: Width) -> Result<u64, TraceError> {
        check_aligned(self.seq, addr, width)?;
        let word = self.memory.get(&(addr & !7)).copied().unwrap_or(0);
        let data = match width {
            Width::W64 => word,
            Width::W32 => (word >> ((addr & 4) * 8)) & 0xFFFF_FFFF,
        };
        self.log.push(MemRef {
            kind: RefKind::Load,
            addr,
            data,
        });
        Ok(data)
    }

    fn store(&mut self, addr: u64, width: Width, value: u64) -> Result<(), TraceError> {
        check_aligned(self.seq, addr, width)?;
        let key = addr & !7;
        let data = value & width.mask();
        let word = match width {
            Width::W64 => data,
            Width::W32 => {
                let shift = (addr & 4) * 8;
                let old = self.memory.get(&key).copied().unwrap_or(0);
                (old & !(0xFFFF_FFFFu64 << shift)) | (data << shift)
            }
        };
        self.memory.insert(key, word);
        self.log.push(MemRef {
            kind: RefKind::Store,
            addr,
            data,
        });
        Ok(())
    }
}

/// Serves loads from a recorded trace line instead of real memory.
struct RecordedMemory<'a> {
    seq: u64,
    refs: &'a [MemRef],
    pos: usize,
}

impl RecordedMemory<'_> {
    fn next(&mut self, kind: RefKind, addr: u64) -> Result<&MemRef, TraceError> {
        let r = self.refs.get(self.pos).ok_or_else(|| TraceError::Inconsistent {
            seq: self.seq,
            msg: "fewer memory references than the instruction performs".into(),
        })?;
        self.pos += 1;
        if r.kind != kind || r.addr != addr {
            return Err(TraceError::Inconsistent {
                seq: self.seq,
                msg: format!(
                    "expected {kind:?} at {addr:#x}, trace has {:?} at {:#x}",
                    r.kind, r.addr
                ),
            });
        }
        Ok(r)
    }
}

impl MemPort for RecordedMemory<'_> {
    fn load(&mut self, addr: u64, width: Width) -> Result<u64, TraceError> {
        check_aligned(self.seq, addr, width)?;
        Ok(self.next(RefKind::Load, addr)?.data)
    }

    fn store(&mut self, addr: u64, width: Width, _value: u64) -> Result<(), TraceError> {
        check_aligned(self.seq, addr, width)?;
        self.next(RefKind::Store, addr).map(|_| ())
    }
}

fn sign_extend(v: u64, width: Width) -> u64 {
    match width {
        Width::W64 => v,
        Width::W32 => v as u32 as i32 as i64 as u64,
    }
}

fn msb(v: u64, width: Width) -> bool {
    (v >> (width.bits() - 1)) & 1 == 1
}

/// Architectural registers and flags, the part of the state that is carried
/// between instructions during both interpretation and replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisterFile {
    pub regs: [u64; 16],
    pub flags: u8,
}

impl RegisterFile {
    pub fn read(&self, loc: Loc) -> u64 {
        match loc {
            Loc::Reg(g) => self.regs[g.index()],
            Loc::Flags => self.flags as u64,
        }
    }

    fn addr(&self, m: &MemExpr) -> u64 {
        m.address(|g| self.regs[g.index()])
    }

    fn operand(
        &self,
        o: &Operand,
        width: Width,
        mem: &mut impl MemPort,
    ) -> Result<u64, TraceError> {
        Ok(match o {
            Operand::Reg(r) => self.regs[r.gpr.index()] & r.width.mask(),
            Operand::Imm(v) => (*v as u64) & width.mask(),
            Operand::Mem(m) => mem.load(self.addr(m), width)?,
            Operand::Label { .. } => unreachable!("labels are not data operands"),
        })
    }

    fn write(&mut self, d: &Operand, width: Width, value: u64, mem: &mut impl MemPort) -> Result<(), TraceError> {
        match d {
            // 32-bit writes zero-extend into the parent
            Operand::Reg(r) => self.regs[r.gpr.index()] = value & r.width.mask(),
            Operand::Mem(m) => mem.store(self.addr(m), width, value)?,
            _ => unreachable!("destination is a register or memory"),
        }
        Ok(())
    }

    fn execute(&mut self, inst: &Instruction, mem: &mut impl MemPort) -> Result<Control, TraceError> {
        use Mnemonic::*;
        let ops = &inst.operands;
        let op_width = |o: &Operand| match o {
            Operand::Reg(r) => Some(r.width),
            _ => None,
        };
        // operation width: any register operand decides; memory/immediate pairs are 64-bit
        let width = ops
            .iter()
            .filter_map(op_width)
            .next()
            .unwrap_or(Width::W64);
        match inst.mnemonic {
            Mov => {
                let v = self.operand(&ops[1], width, mem)?;
                self.write(&ops[0], width, v, mem)?;
            }
            Movsxd => {
                let v = self.operand(&ops[1], Width::W32, mem)?;
                self.write(&ops[0], Width::W64, sign_extend(v, Width::W32), mem)?;
            }
            Lea => {
                let m = ops[1].as_mem().expect("lea has a memory operand");
                let a = self.addr(m);
                self.write(&ops[0], Width::W64, a, mem)?;
            }
            Add | Sub | Imul | And | Or | Xor => {
                let a = self.operand(&ops[0], width, mem)?;
                let b = self.operand(&ops[1], width, mem)?;
                let b = if matches!(ops[1], Operand::Imm(_)) {
                    sign_extend(b, width)
                } else {
                    b
                };
                let r = match inst.mnemonic {
                    Add => a.wrapping_add(b),
                    Sub => a.wrapping_sub(b),
                    Imul => a.wrapping_mul(b),
                    And => a & b,
                    Or => a | b,
                    _ => a ^ b,
                };
                self.write(&ops[0], width, r & width.mask(), mem)?;
            }
            Inc | Dec => {
                let a = self.operand(&ops[0], width, mem)?;
                let r = if inst.mnemonic == Inc {
                    a.wrapping_add(1)
                } else {
                    a.wrapping_sub(1)
                };
                self.write(&ops[0], width, r & width.mask(), mem)?;
            }
            Cmp | Test => {
                let a = self.operand(&ops[0], width, mem)?;
                let b = self.operand(&ops[1], width, mem)?;
                let (r, of) = if inst.mnemonic == Cmp {
                    let r = a.wrapping_sub(b) & width.mask();
                    (r, msb((a ^ b) & (a ^ r), width))
                } else {
                    (a & b, false)
                };
                self.flags = (r == 0) as u8 * FLAG_ZF
                    | msb(r, width) as u8 * FLAG_SF
                    | of as u8 * FLAG_OF;
            }
            Jmp => return Ok(Control::Jump(inst.branch_target().unwrap())),
            Je | Jne | Jl | Jge => {
                let zf = self.flags & FLAG_ZF != 0;
                let sf = self.flags & FLAG_SF != 0;
                let of = self.flags & FLAG_OF != 0;
                let taken = match inst.mnemonic {
                    Je => zf,
                    Jne => !zf,
                    Jl => sf != of,
                    _ => sf == of,
                };
                if taken {
                    return Ok(Control::Jump(inst.branch_target().unwrap()));
                }
            }
            Nop => {}
            Halt => return Ok(Control::Halt),
        }
        Ok(Control::Next)
    }
}

fn snapshot_reads(inst: &Instruction, rf: &RegisterFile) -> SmallVec<[(Loc, u64); 3]> {
    inst.reads().into_iter().map(|l| (l, rf.read(l))).collect()
}

/// Executes `p` from `init` for at most `max_insts` dynamic instructions.
pub fn run(p: &Program, init: &MachineState, max_insts: u64) -> Result<Trace, TraceError> {
    if max_insts == 0 {
        return Err(TraceError::ZeroBudget);
    }
    let mut rf = RegisterFile {
        regs: init.regs,
        flags: init.flags,
    };
    let mut memory = init.memory.clone();
    let mut pc = init.pc;
    let mut records = Vec::new();
    let mut truncated = true;
    for seq in 0..max_insts {
        let inst = p
            .instructions
            .get(pc)
            .ok_or(TraceError::FellOff { seq, pc })?;
        let regs = snapshot_reads(inst, &rf);
        let mut log = SmallVec::new();
        let ctl = rf.execute(
            inst,
            &mut LiveMemory {
                seq,
                memory: &mut memory,
                log: &mut log,
            },
        )?;
        records.push(TraceRecord {
            seq,
            inst_index: pc as u32,
            regs,
            mem: log,
        });
        match ctl {
            Control::Next => pc += 1,
            Control::Jump(t) => pc = t,
            Control::Halt => {
                truncated = false;
                break;
            }
        }
    }
    if truncated && records.len() < max_insts as usize {
        truncated = false;
    }
    Ok(Trace {
        program_hash: p.content_hash(),
        init_regs: init.regs,
        init_flags: init.flags,
        records,
        truncated,
    })
}

/// Re-derives the full register file at every trace position from the trace
/// alone (initial registers from the header, loaded data from the records),
/// checking each record against the program.
pub struct Replayer<'a> {
    program: &'a Program,
    trace: &'a Trace,
    rf: RegisterFile,
    next: usize,
}

impl<'a> Replayer<'a> {
    pub fn new(program: &'a Program, trace: &'a Trace) -> Result<Self, TraceError> {
        let expected = program.content_hash();
        if trace.program_hash != expected {
            return Err(TraceError::ProgramMismatch {
                expected,
                found: trace.program_hash,
            });
        }
        Ok(Replayer {
            program,
            trace,
            rf: RegisterFile {
                regs: trace.init_regs,
                flags: trace.init_flags,
            },
            next: 0,
        })
    }

    /// Registers and flags before record `position()` executes.
    pub fn registers(&self) -> &RegisterFile {
        &self.rf
    }

    pub fn position(&self) -> usize {
        self.next
    }

    pub fn step(&mut self) -> Result<(), TraceError> {
        let rec = &self.trace.records[self.next];
        let inst = self
            .program
            .instructions
            .get(rec.inst_index as usize)
            .ok_or_else(|| TraceError::Inconsistent {
                seq: rec.seq,
                msg: format!("instruction index {} out of range", rec.inst_index),
            })?;
        for &(loc, v) in &rec.regs {
            if self.rf.read(loc) != v {
                return Err(TraceError::Inconsistent {
                    seq: rec.seq,
                    msg: format!("{loc} is {:#x} in replay, {v:#x} in trace", self.rf.read(loc)),
                });
            }
        }
        let mut port = RecordedMemory {
            seq: rec.seq,
            refs: &rec.mem,
            pos: 0,
        };
        self.rf.execute(inst, &mut port)?;
        self.next += 1;
        Ok(())
    }

    /// Advances until `position() == target`.
    pub fn advance_to(&mut self, target: usize) -> Result<(), TraceError> {
        while self.next < target {
            self.step()?;
        }
        Ok(())
    }
}

fn loc_name(l: Loc) -> &'static str {
    match l {
        Loc::Reg(g) => g.name64(),
        Loc::Flags => "flags",
    }
}

fn parse_loc(s: &str) -> Option<Loc> {
    if s == "flags" {
        Some(Loc::Flags)
    } else {
        Gpr::from_name64(s).map(Loc::Reg)
    }
}

const HEADER_TAG: &str = "#nps-trace";
const END_TAG: &str = "#end";

/// Line format, one record per line:
/// `seq inst_index [R:<reg>=<hex>]* [L|S:<hexaddr>=<hexdata>]*`,
/// preceded by a header carrying the program hash and initial registers and
/// followed by an end marker with the record count.
pub fn write_trace(t: &Trace, path: &Path) -> Result<(), TraceError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace_to(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_trace_to(t: &Trace, w: &mut impl Write) -> Result<(), TraceError> {
    write!(w, "{HEADER_TAG} v1 program={:016x} flags={:x}", t.program_hash, t.init_flags)?;
    for g in Gpr::ALL {
        let v = t.init_regs[g.index()];
        if v != 0 {
            write!(w, " {}={v:x}", g.name64())?;
        }
    }
    writeln!(w)?;
    let mut line = String::with_capacity(64);
    for r in &t.records {
        line.clear();
        let _ = write!(line, "{} {}", r.seq, r.inst_index);
        for &(l, v) in &r.regs {
            let _ = write!(line, " R:{}={v:x}", loc_name(l));
        }
        for m in &r.mem {
            let tag = if m.kind == RefKind::Load { 'L' } else { 'S' };
            let _ = write!(line, " {tag}:{:x}={:x}", m.addr, m.data);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    writeln!(w, "{END_TAG} records={} truncated={}", t.records.len(), t.truncated as u8)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Trace, TraceError> {
    read_trace_from(BufReader::new(File::open(path)?))
}

pub fn read_trace_from(r: impl BufRead) -> Result<Trace, TraceError> {
    let mut lines = r.lines();
    let malformed = |record: usize, msg: String| TraceError::Malformed { record, msg };
    let header = lines.next().ok_or(TraceError::Truncated { after: 0 })??;
    let mut words = header.split_whitespace();
    if words.next() != Some(HEADER_TAG) || words.next() != Some("v1") {
        return Err(malformed(0, "missing trace header".into()));
    }
    let mut program_hash = None;
    let mut init_flags = 0u8;
    let mut init_regs = [0u64; 16];
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| malformed(0, format!("bad header field `{w}`")))?;
        let num = u64::from_str_radix(v, 16).map_err(|_| malformed(0, format!("bad hex `{v}`")))?;
        match k {
            "program" => program_hash = Some(num),
            "flags" => init_flags = num as u8,
            reg => {
                let g = Gpr::from_name64(reg)
                    .ok_or_else(|| malformed(0, format!("unknown header field `{reg}`")))?;
                init_regs[g.index()] = num;
            }
        }
    }
    let program_hash = program_hash.ok_or_else(|| malformed(0, "header lacks program hash".into()))?;
    let mut records = Vec::new();
    let mut end: Option<(usize, bool)> = None;
    for line in lines {
        let line = line?;
        let idx = records.len();
        if end.is_some() {
            if line.trim().is_empty() {
                continue;
            }
            return Err(malformed(idx, "content after end marker".into()));
        }
        if let Some(rest) = line.strip_prefix(END_TAG) {
            let mut count = None;
            let mut truncated = None;
            for f in rest.split_whitespace() {
                match f.split_once('=') {
                    Some(("records", v)) => count = v.parse::<usize>().ok(),
                    Some(("truncated", v)) => truncated = Some(v == "1"),
                    _ => return Err(malformed(idx, format!("bad end marker field `{f}`"))),
                }
            }
            let count = count.ok_or_else(|| malformed(idx, "end marker lacks a record count".into()))?;
            if count != idx {
                return Err(malformed(idx, format!("end marker says {count} records, found {idx}")));
            }
            end = Some((count, truncated.unwrap_or(false)));
            continue;
        }
        records.push(parse_record(&line, idx)?);
    }
    let (_, truncated) = end.ok_or(TraceError::Truncated { after: records.len() })?;
    Ok(Trace {
        program_hash,
        init_regs,
        init_flags,
        records,
        truncated,
    })
}

fn parse_record(line: &str, idx: usize) -> Result<TraceRecord, TraceError> {
    let malformed = |msg: String| TraceError::Malformed { record: idx, msg };
    let mut it = line.split(' ');
    let seq: u64 = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed("bad sequence number".into()))?;
    if seq != idx as u64 {
        return Err(malformed(format!("sequence number {seq} out of order")));
    }
    let inst_index: u32 = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed("bad instruction index".into()))?;
    let mut regs = SmallVec::new();
    let mut mem = SmallVec::new();
    for f in it {
        let (tag, body) = f
            .split_once(':')
            .ok_or_else(|| malformed(format!("bad field `{f}`")))?;
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| malformed(format!("bad field `{f}`")))?;
        let v = u64::from_str_radix(v, 16).map_err(|_| malformed(format!("bad hex in `{f}`")))?;
        match tag {
            "R" => {
                if !mem.is_empty() {
                    return Err(malformed("register field after memory field".into()));
                }
                let l = parse_loc(k).ok_or_else(|| malformed(format!("unknown register `{k}`")))?;
                regs.push((l, v));
            }
            "L" | "S" => {
                let addr =
                    u64::from_str_radix(k, 16).map_err(|_| malformed(format!("bad address in `{f}`")))?;
                let kind = if tag == "L" { RefKind::Load } else { RefKind::Store };
                mem.push(MemRef { kind, addr, data: v });
            }
            _ => return Err(malformed(format!("unknown field tag `{tag}`"))),
        }
    }
    Ok(TraceRecord {
        seq,
        inst_index,
        regs,
        mem,
    })
}
