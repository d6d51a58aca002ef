//! Intel-syntax assembly subset: parser, instruction IR and canonical printer.
//!
//! One instruction or label per line, `;` starts a comment. Labels may share a
//! line with an instruction (`loop: add rax, 1`). Two directives exist:
//! `.data <addr> <word>, <word>, ...` preloads consecutive 64-bit words, and
//! `.entry <label>` selects the entry instruction (default: index 0).

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}, column {col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{name}`")]
    UnknownMnemonic { line: usize, name: String },
    #[error("line {line}: unresolved label `{label}`")]
    UnresolvedLabel { line: usize, label: String },
    #[error("line {line}: `{mnemonic}` takes {expected} operand(s), found {found}")]
    Arity {
        line: usize,
        mnemonic: Mnemonic,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: invalid operand: {msg}")]
    InvalidOperand { line: usize, msg: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("program contains no instructions")]
    Empty,
}

/// The sixteen general purpose registers. Aliases of different width share one
/// of these as their canonical 64-bit parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Gpr {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    Rbp,
    Rsp,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Gpr {
    pub const ALL: [Gpr; 16] = [
        Gpr::Rax,
        Gpr::Rbx,
        Gpr::Rcx,
        Gpr::Rdx,
        Gpr::Rsi,
        Gpr::Rdi,
        Gpr::Rbp,
        Gpr::Rsp,
        Gpr::R8,
        Gpr::R9,
        Gpr::R10,
        Gpr::R11,
        Gpr::R12,
        Gpr::R13,
        Gpr::R14,
        Gpr::R15,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name64(self) -> &'static str {
        [
            "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "r8", "r9", "r10", "r11",
            "r12", "r13", "r14", "r15",
        ][self.index()]
    }

    pub fn name32(self) -> &'static str {
        [
            "eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp", "r8d", "r9d", "r10d", "r11d",
            "r12d", "r13d", "r14d", "r15d",
        ][self.index()]
    }

    pub fn from_name64(name: &str) -> Option<Gpr> {
        Gpr::ALL.iter().copied().find(|g| g.name64() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Width {
    W32,
    W64,
}

impl Width {
    pub fn bits(self) -> u32 {
        match self {
            Width::W32 => 32,
            Width::W64 => 64,
        }
    }

    pub fn mask(self) -> u64 {
        match self {
            Width::W32 => 0xFFFF_FFFF,
            Width::W64 => u64::MAX,
        }
    }
}

/// A register operand: canonical parent plus the width it is accessed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Register {
    pub gpr: Gpr,
    pub width: Width,
}

impl Register {
    pub fn r64(gpr: Gpr) -> Self {
        Register {
            gpr,
            width: Width::W64,
        }
    }

    pub fn r32(gpr: Gpr) -> Self {
        Register {
            gpr,
            width: Width::W32,
        }
    }

    pub fn parse(name: &str) -> Option<Register> {
        Gpr::ALL.iter().copied().find_map(|g| {
            if g.name64() == name {
                Some(Register::r64(g))
            } else if g.name32() == name {
                Some(Register::r32(g))
            } else {
                None
            }
        })
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.width {
            Width::W64 => f.write_str(self.gpr.name64()),
            Width::W32 => f.write_str(self.gpr.name32()),
        }
    }
}

/// `[base + index*scale + displacement]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemExpr {
    pub base: Option<Gpr>,
    pub index: Option<Gpr>,
    pub scale: u8,
    pub disp: i64,
}

impl MemExpr {
    pub fn address(&self, read: impl Fn(Gpr) -> u64) -> u64 {
        let mut a = self.disp as u64;
        if let Some(b) = self.base {
            a = a.wrapping_add(read(b));
        }
        if let Some(i) = self.index {
            a = a.wrapping_add(read(i).wrapping_mul(self.scale as u64));
        }
        a
    }

    pub fn registers(&self) -> impl Iterator<Item = Gpr> {
        self.base.into_iter().chain(self.index)
    }
}

impl fmt::Display for MemExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        let mut first = true;
        if let Some(b) = self.base {
            f.write_str(b.name64())?;
            first = false;
        }
        if let Some(i) = self.index {
            if !first {
                f.write_str("+")?;
            }
            write!(f, "{}*{}", i.name64(), self.scale)?;
            first = false;
        }
        if self.disp != 0 || first {
            if first {
                write!(f, "{}", self.disp)?;
            } else if self.disp < 0 {
                write!(f, "-{}", self.disp.unsigned_abs())?;
            } else {
                write!(f, "+{}", self.disp)?;
            }
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Register),
    Imm(i64),
    Mem(MemExpr),
    /// Branch target, resolved to an instruction index.
    Label { name: String, target: usize },
}

impl Operand {
    pub fn as_mem(&self) -> Option<&MemExpr> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "{v}"),
            Operand::Mem(m) => write!(f, "{m}"),
            Operand::Label { name, .. } => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mnemonic {
    Mov,
    Movsxd,
    Lea,
    Add,
    Sub,
    Imul,
    And,
    Or,
    Xor,
    Inc,
    Dec,
    Cmp,
    Test,
    Jmp,
    Je,
    Jne,
    Jl,
    Jge,
    Nop,
    Halt,
}

impl Mnemonic {
    pub const ALL: [Mnemonic; 20] = [
        Mnemonic::Mov,
        Mnemonic::Movsxd,
        Mnemonic::Lea,
        Mnemonic::Add,
        Mnemonic::Sub,
        Mnemonic::Imul,
        Mnemonic::And,
        Mnemonic::Or,
        Mnemonic::Xor,
        Mnemonic::Inc,
        Mnemonic::Dec,
        Mnemonic::Cmp,
        Mnemonic::Test,
        Mnemonic::Jmp,
        Mnemonic::Je,
        Mnemonic::Jne,
        Mnemonic::Jl,
        Mnemonic::Jge,
        Mnemonic::Nop,
        Mnemonic::Halt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mnemonic::Mov => "mov",
            Mnemonic::Movsxd => "movsxd",
            Mnemonic::Lea => "lea",
            Mnemonic::Add => "add",
            Mnemonic::Sub => "sub",
            Mnemonic::Imul => "imul",
            Mnemonic::And => "and",
            Mnemonic::Or => "or",
            Mnemonic::Xor => "xor",
            Mnemonic::Inc => "inc",
            Mnemonic::Dec => "dec",
            Mnemonic::Cmp => "cmp",
            Mnemonic::Test => "test",
            Mnemonic::Jmp => "jmp",
            Mnemonic::Je => "je",
            Mnemonic::Jne => "jne",
            Mnemonic::Jl => "jl",
            Mnemonic::Jge => "jge",
            Mnemonic::Nop => "nop",
            Mnemonic::Halt => "halt",
        }
    }

    pub fn parse(name: &str) -> Option<Mnemonic> {
        Mnemonic::ALL.iter().copied().find(|m| m.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Mnemonic::Nop | Mnemonic::Halt => 0,
            Mnemonic::Inc
            | Mnemonic::Dec
            | Mnemonic::Jmp
            | Mnemonic::Je
            | Mnemonic::Jne
            | Mnemonic::Jl
            | Mnemonic::Jge => 1,
            _ => 2,
        }
    }

    pub fn is_conditional_branch(self) -> bool {
        matches!(
            self,
            Mnemonic::Je | Mnemonic::Jne | Mnemonic::Jl | Mnemonic::Jge
        )
    }

    pub fn is_branch(self) -> bool {
        self == Mnemonic::Jmp || self.is_conditional_branch()
    }

    /// Instructions after which control never falls through.
    pub fn ends_flow(self) -> bool {
        matches!(self, Mnemonic::Jmp | Mnemonic::Halt)
    }

    pub fn sets_flags(self) -> bool {
        matches!(self, Mnemonic::Cmp | Mnemonic::Test)
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architectural locations an instruction can read or write for the purpose
/// of dataflow tracking. Flags are a single pseudo location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Loc {
    Reg(Gpr),
    Flags,
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loc::Reg(g) => f.write_str(g.name64()),
            Loc::Flags => f.write_str("flags"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub index: usize,
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
    pub line: usize,
}

/// Source operands of an instruction, in operand-position order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source<'a> {
    Reg(Register),
    Imm(i64),
    Mem(&'a MemExpr),
    Flags,
}

/// Destination of an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest<'a> {
    Reg(Register),
    Mem(&'a MemExpr),
    Flags,
}

impl Instruction {
    pub fn mem_operand(&self) -> Option<&MemExpr> {
        self.operands.iter().find_map(Operand::as_mem)
    }

    /// Whether the instruction touches memory (loads or stores). `lea` only
    /// computes an address.
    pub fn accesses_memory(&self) -> bool {
        self.mnemonic != Mnemonic::Lea && self.mem_operand().is_some()
    }

    pub fn branch_target(&self) -> Option<usize> {
        match self.operands.first() {
            Some(Operand::Label { target, .. }) if self.mnemonic.is_branch() => Some(*target),
            _ => None,
        }
    }

    /// Data sources in operand-position order (left, right).
    pub fn sources(&self) -> Vec<Source<'_>> {
        use Mnemonic::*;
        fn op(o: &Operand) -> Source<'_> {
            match o {
                Operand::Reg(r) => Source::Reg(*r),
                Operand::Imm(v) => Source::Imm(*v),
                Operand::Mem(m) => Source::Mem(m),
                Operand::Label { .. } => unreachable!("labels are not data sources"),
            }
        }
        match self.mnemonic {
            Mov | Movsxd => vec![op(&self.operands[1])],
            // the address expression is grown separately
            Lea => Vec::new(),
            Add | Sub | Imul | And | Or | Xor | Cmp | Test => {
                vec![op(&self.operands[0]), op(&self.operands[1])]
            }
            Inc | Dec => vec![op(&self.operands[0])],
            Je | Jne | Jl | Jge => vec![Source::Flags],
            Jmp | Nop | Halt => Vec::new(),
        }
    }

    pub fn dest(&self) -> Option<Dest<'_>> {
        use Mnemonic::*;
        match self.mnemonic {
            Cmp | Test => Some(Dest::Flags),
            Jmp | Je | Jne | Jl | Jge | Nop | Halt => None,
            _ => match &self.operands[0] {
                Operand::Reg(r) => Some(Dest::Reg(*r)),
                Operand::Mem(m) => Some(Dest::Mem(m)),
                _ => None,
            },
        }
    }

    /// Locations read, including address registers of memory operands.
    pub fn reads(&self) -> Vec<Loc> {
        let mut out = Vec::new();
        let mut push = |l: Loc| {
            if !out.contains(&l) {
                out.push(l);
            }
        };
        for s in self.sources() {
            match s {
                Source::Reg(r) => push(Loc::Reg(r.gpr)),
                Source::Flags => push(Loc::Flags),
                Source::Mem(_) | Source::Imm(_) => {}
            }
        }
        if let Some(m) = self.mem_operand() {
            for g in m.registers() {
                push(Loc::Reg(g));
            }
        }
        out
    }

    pub fn writes(&self) -> Option<Loc> {
        match self.dest()? {
            Dest::Reg(r) => Some(Loc::Reg(r.gpr)),
            Dest::Flags => Some(Loc::Flags),
            Dest::Mem(_) => None,
        }
    }

    /// Width of the written register, if the destination is a register.
    pub fn write_width(&self) -> Option<Width> {
        match self.dest()? {
            Dest::Reg(r) => Some(r.width),
            _ => None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic.name())?;
        for (i, o) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{o}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
    pub entry: usize,
    /// Preloaded memory words, `(byte address, value)`, in declaration order.
    pub data: Vec<(u64, u64)>,
}

impl Program {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Control-flow successors of instruction `i`: fallthrough first, then the
    /// branch target.
    pub fn successors(&self, i: usize) -> Vec<usize> {
        let inst = &self.instructions[i];
        let mut out = Vec::with_capacity(2);
        if !inst.mnemonic.ends_flow() && i + 1 < self.len() {
            out.push(i + 1);
        }
        if let Some(t) = inst.branch_target() {
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out
    }

    /// Canonical source text: re-parsing it yields an identical program.
    pub fn to_source(&self) -> String {
        let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (name, &i) in &self.labels {
            by_index.entry(i).or_default().push(name);
        }
        let mut s = String::new();
        let entry_label = by_index.get(&self.entry).map(|v| v[0].to_string());
        if self.entry != 0 {
            if let Some(l) = &entry_label {
                s.push_str(&format!(".entry {l}\n"));
            }
        }
        for chunk in group_data(&self.data) {
            let words: Vec<String> = chunk.1.iter().map(|w| format!("{w:#x}")).collect();
            s.push_str(&format!(".data {:#x} {}\n", chunk.0, words.join(", ")));
        }
        for inst in &self.instructions {
            if let Some(names) = by_index.get(&inst.index) {
                for n in names {
                    s.push_str(&format!("{n}:\n"));
                }
            }
            s.push_str(&format!("    {inst}\n"));
        }
        s
    }

    /// Canonical one-line-per-instruction dump with resolved branch targets.
    pub fn dump_ir(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("entry {}\n", self.entry));
        for (name, i) in &self.labels {
            s.push_str(&format!("label {name} -> {i}\n"));
        }
        for (a, w) in &self.data {
            s.push_str(&format!("data {a:#x} = {w:#x}\n"));
        }
        for inst in &self.instructions {
            s.push_str(&format!("{:>4} {}", inst.index, inst.mnemonic));
            for (k, o) in inst.operands.iter().enumerate() {
                s.push_str(if k == 0 { " " } else { ", " });
                match o {
                    Operand::Reg(r) => s.push_str(&format!("reg:{r}")),
                    Operand::Imm(v) => s.push_str(&format!("imm:{v}")),
                    Operand::Mem(m) => s.push_str(&format!(
                        "mem:{{base={},index={},scale={},disp={}}}",
                        m.base.map_or("-", Gpr::name64),
                        m.index.map_or("-", Gpr::name64),
                        m.scale,
                        m.disp
                    )),
                    Operand::Label { name, target } => {
                        s.push_str(&format!("label:{name}@{target}"))
                    }
                }
            }
            s.push_str(&format!("  ; line {}\n", inst.line));
        }
        s
    }

    /// Equality ignoring source line numbers.
    pub fn same_structure(&self, other: &Program) -> bool {
        self.entry == other.entry
            && self.labels == other.labels
            && self.data == other.data
            && self.instructions.len() == other.instructions.len()
            && self
                .instructions
                .iter()
                .zip(&other.instructions)
                .all(|(a, b)| a.index == b.index && a.mnemonic == b.mnemonic && a.operands == b.operands)
    }

    /// Stable 64-bit content hash of the canonical form.
    pub fn content_hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_source().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}

fn group_data(data: &[(u64, u64)]) -> Vec<(u64, Vec<u64>)> {
    let mut out: Vec<(u64, Vec<u64>)> = Vec::new();
    for &(a, w) in data {
        match out.last_mut() {
            Some((start, words)) if *start + 8 * words.len() as u64 == a => words.push(w),
            _ => out.push((a, vec![w])),
        }
    }
    out
}

struct PendingInst {
    mnemonic: Mnemonic,
    operands: Vec<RawOperand>,
    line: usize,
}

enum RawOperand {
    Op(Operand),
    Label(String, usize),
}

/// Parses program text. Pure: identical text always yields an identical
/// program.
pub fn parse_program(source: &str) -> Result<Program, ParseError> {
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut pending: Vec<PendingInst> = Vec::new();
    let mut data = Vec::new();
    let mut entry_label: Option<(String, usize)> = None;

    for (lineno, raw) in source.lines().enumerate() {
        let line = lineno + 1;
        let text = raw.split(';').next().unwrap_or("");
        let trimmed = text.trim();
        if trimmed.is_empty() {
            continue;
        }
        let base_col = text.len() - text.trim_start().len() + 1;

        if let Some(rest) = trimmed.strip_prefix('.') {
            parse_directive(rest, line, base_col, &mut data, &mut entry_label)?;
            continue;
        }

        let mut body = trimmed;
        let mut col = base_col;
        if let Some(pos) = body.find(':') {
            let name = body[..pos].trim();
            if !is_ident(name) {
                return Err(ParseError::Syntax {
                    line,
                    col,
                    msg: format!("invalid label name `{name}`"),
                });
            }
            if labels.insert(name.to_string(), pending.len()).is_some() {
                return Err(ParseError::DuplicateLabel {
                    line,
                    label: name.to_string(),
                });
            }
            let after = &body[pos + 1..];
            col += pos + 1 + (after.len() - after.trim_start().len());
            body = after.trim();
            if body.is_empty() {
                continue;
            }
        }
        pending.push(parse_instruction(body, line, col)?);
    }

    if pending.is_empty() {
        return Err(ParseError::Empty);
    }
    let n = pending.len();
    let mut instructions = Vec::with_capacity(n);
    for (index, p) in pending.into_iter().enumerate() {
        let mut operands = Vec::with_capacity(p.operands.len());
        for o in p.operands {
            operands.push(match o {
                RawOperand::Op(op) => op,
                RawOperand::Label(name, line) => {
                    let target = match labels.get(&name) {
                        Some(&t) if t < n => t,
                        _ => return Err(ParseError::UnresolvedLabel { line, label: name }),
                    };
                    Operand::Label { name, target }
                }
            });
        }
        instructions.push(Instruction {
            index,
            mnemonic: p.mnemonic,
            operands,
            line: p.line,
        });
    }
    for (name, &i) in &labels {
        if i >= n {
            let line = instructions.last().map_or(0, |x| x.line);
            return Err(ParseError::UnresolvedLabel {
                line,
                label: name.clone(),
            });
        }
    }
    let entry = match entry_label {
        None => 0,
        Some((name, line)) => *labels
            .get(&name)
            .ok_or(ParseError::UnresolvedLabel { line, label: name })?,
    };
    Ok(Program {
        instructions,
        labels,
        entry,
        data,
    })
}

fn parse_directive(
    rest: &str,
    line: usize,
    col: usize,
    data: &mut Vec<(u64, u64)>,
    entry: &mut Option<(String, usize)>,
) -> Result<(), ParseError> {
    let (name, args) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    match name {
        "data" => {
            let args = args.trim();
            let (addr, words) = args.split_once(char::is_whitespace).ok_or(ParseError::Syntax {
                line,
                col,
                msg: "`.data` needs an address and at least one word".into(),
            })?;
            let addr = parse_int(addr).ok_or_else(|| ParseError::Syntax {
                line,
                col,
                msg: format!("bad address `{addr}`"),
            })? as u64;
            if addr % 8 != 0 {
                return Err(ParseError::Syntax {
                    line,
                    col,
                    msg: "`.data` address must be 8-byte aligned".into(),
                });
            }
            for (k, w) in words.split(',').enumerate() {
                let v = parse_int(w.trim()).ok_or_else(|| ParseError::Syntax {
                    line,
                    col,
                    msg: format!("bad data word `{}`", w.trim()),
                })?;
                data.push((addr + 8 * k as u64, v as u64));
            }
            Ok(())
        }
        "entry" => {
            let l = args.trim();
            if !is_ident(l) {
                return Err(ParseError::Syntax {
                    line,
                    col,
                    msg: format!("bad entry label `{l}`"),
                });
            }
            *entry = Some((l.to_string(), line));
            Ok(())
        }
        other => Err(ParseError::Syntax {
            line,
            col,
            msg: format!("unknown directive `.{other}`"),
        }),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let mag: u64 = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()?
    } else if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) {
        body.parse().ok()?
    } else {
        return None;
    };
    if neg {
        Some((mag as i64).wrapping_neg())
    } else {
        Some(mag as i64)
    }
}

fn parse_instruction(body: &str, line: usize, col: usize) -> Result<PendingInst, ParseError> {
    let (name, rest) = body
        .split_once(char::is_whitespace)
        .map_or((body, ""), |(a, b)| (a, b));
    let mnemonic = Mnemonic::parse(&name.to_ascii_lowercase()).ok_or_else(|| {
        if is_ident(name) {
            ParseError::UnknownMnemonic {
                line,
                name: name.to_string(),
            }
        } else {
            ParseError::Syntax {
                line,
                col,
                msg: format!("expected a mnemonic, found `{name}`"),
            }
        }
    })?;
    let rest_trim = rest.trim();
    let pieces: Vec<&str> = if rest_trim.is_empty() {
        Vec::new()
    } else {
        rest_trim.split(',').map(str::trim).collect()
    };
    if pieces.len() != mnemonic.arity() {
        return Err(ParseError::Arity {
            line,
            mnemonic,
            expected: mnemonic.arity(),
            found: pieces.len(),
        });
    }
    let ops_col = col + name.len() + (rest.len() - rest.trim_start().len());
    let mut operands = Vec::with_capacity(pieces.len());
    for p in &pieces {
        let c = ops_col + body[name.len()..].find(p).unwrap_or(0);
        if p.is_empty() {
            return Err(ParseError::Syntax {
                line,
                col: c,
                msg: "empty operand".into(),
            });
        }
        if mnemonic.is_branch() {
            if !is_ident(p) || Register::parse(p).is_some() {
                return Err(ParseError::InvalidOperand {
                    line,
                    msg: format!("`{mnemonic}` needs a label operand, found `{p}`"),
                });
            }
            operands.push(RawOperand::Label(p.to_string(), line));
        } else {
            operands.push(RawOperand::Op(parse_operand(p, line, c)?));
        }
    }
    let inst = PendingInst {
        mnemonic,
        operands,
        line,
    };
    validate(&inst)?;
    Ok(inst)
}

fn parse_operand(p: &str, line: usize, col: usize) -> Result<Operand, ParseError> {
    let lower = p.to_ascii_lowercase();
    if let Some(r) = Register::parse(&lower) {
        return Ok(Operand::Reg(r));
    }
    if let Some(v) = parse_int(&lower) {
        return Ok(Operand::Imm(v));
    }
    if lower.starts_with('[') {
        let inner = lower
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| ParseError::Syntax {
                line,
                col,
                msg: "unterminated memory operand".into(),
            })?;
        return parse_mem(inner, line, col + 1).map(Operand::Mem);
    }
    Err(ParseError::Syntax {
        line,
        col,
        msg: format!("unrecognized operand `{p}`"),
    })
}

fn parse_mem(inner: &str, line: usize, col: usize) -> Result<MemExpr, ParseError> {
    let syntax = |msg: String| ParseError::Syntax { line, col, msg };
    let compact: String = inner.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err(syntax("empty memory expression".into()));
    }
    // split into signed terms
    let mut terms: Vec<(bool, String)> = Vec::new();
    let mut cur = String::new();
    let mut neg = false;
    for (i, ch) in compact.chars().enumerate() {
        if (ch == '+' || ch == '-') && i > 0 {
            terms.push((neg, std::mem::take(&mut cur)));
            neg = ch == '-';
        } else if ch == '-' && i == 0 {
            neg = true;
        } else {
            cur.push(ch);
        }
    }
    terms.push((neg, cur));

    let mut e = MemExpr {
        base: None,
        index: None,
        scale: 1,
        disp: 0,
    };
    let mut saw_disp = false;
    for (neg, t) in terms {
        if t.is_empty() {
            return Err(syntax("dangling operator in memory expression".into()));
        }
        if let Some((a, b)) = t.split_once('*') {
            let (reg, sc) = match (Register::parse(a), Register::parse(b)) {
                (Some(r), None) => (r, b),
                (None, Some(r)) => (r, a),
                _ => return Err(syntax(format!("bad scaled index `{t}`"))),
            };
            if neg || reg.width != Width::W64 || e.index.is_some() {
                return Err(syntax(format!("bad scaled index `{t}`")));
            }
            let scale = match parse_int(sc) {
                Some(s @ (1 | 2 | 4 | 8)) => s as u8,
                _ => return Err(syntax(format!("scale must be 1, 2, 4 or 8, found `{sc}`"))),
            };
            e.index = Some(reg.gpr);
            e.scale = scale;
        } else if let Some(r) = Register::parse(&t) {
            if neg || r.width != Width::W64 {
                return Err(syntax(format!("address register `{t}` must be a positive 64-bit register")));
            }
            if e.base.is_none() {
                e.base = Some(r.gpr);
            } else if e.index.is_none() {
                e.index = Some(r.gpr);
                e.scale = 1;
            } else {
                return Err(syntax("too many registers in memory expression".into()));
            }
        } else if let Some(v) = parse_int(&t) {
            if saw_disp {
                return Err(syntax("more than one displacement".into()));
            }
            saw_disp = true;
            e.disp = if neg { v.wrapping_neg() } else { v };
        } else {
            return Err(syntax(format!("bad term `{t}` in memory expression")));
        }
    }
    Ok(e)
}

fn validate(p: &PendingInst) -> Result<(), ParseError> {
    use Mnemonic::*;
    let line = p.line;
    let bad = |msg: &str| ParseError::InvalidOperand {
        line,
        msg: format!("`{}`: {msg}", p.mnemonic),
    };
    let ops: Vec<&Operand> = p
        .operands
        .iter()
        .filter_map(|o| match o {
            RawOperand::Op(op) => Some(op),
            RawOperand::Label(..) => None,
        })
        .collect();
    let mems = ops.iter().filter(|o| matches!(o, Operand::Mem(_))).count();
    if mems > 1 {
        return Err(bad("at most one memory operand"));
    }
    let reg_width = |o: &Operand| match o {
        Operand::Reg(r) => Some(r.width),
        _ => None,
    };
    match p.mnemonic {
        Mov => match (ops[0], ops[1]) {
            (Operand::Reg(d), Operand::Reg(s)) if d.width != s.width => {
                Err(bad("register widths differ"))
            }
            (Operand::Reg(_), _) => Ok(()),
            (Operand::Mem(_), Operand::Reg(_) | Operand::Imm(_)) => Ok(()),
            _ => Err(bad("destination must be a register or memory")),
        },
        Movsxd => match (ops[0], ops[1]) {
            (Operand::Reg(d), Operand::Reg(s)) if d.width == Width::W64 && s.width == Width::W32 => {
                Ok(())
            }
            (Operand::Reg(d), Operand::Mem(_)) if d.width == Width::W64 => Ok(()),
            _ => Err(bad("expects a 64-bit register and a 32-bit source")),
        },
        Lea => match (ops[0], ops[1]) {
            (Operand::Reg(d), Operand::Mem(_)) if d.width == Width::W64 => Ok(()),
            _ => Err(bad("expects a 64-bit register and a memory expression")),
        },
        Add | Sub | Imul | And | Or | Xor => match (ops[0], ops[1]) {
            (Operand::Reg(d), s) => match reg_width(s) {
                Some(w) if w != d.width => Err(bad("register widths differ")),
                _ => Ok(()),
            },
            _ => Err(bad("destination must be a register")),
        },
        Cmp | Test => match (ops[0], ops[1]) {
            (Operand::Imm(_), _) => Err(bad("first operand cannot be an immediate")),
            (a, b) => match (reg_width(a), reg_width(b)) {
                (Some(x), Some(y)) if x != y => Err(bad("register widths differ")),
                _ => Ok(()),
            },
        },
        Inc | Dec => match ops[0] {
            Operand::Reg(_) => Ok(()),
            _ => Err(bad("operand must be a register")),
        },
        Jmp | Je | Jne | Jl | Jge | Nop | Halt => Ok(()),
    }
}
