//! Random straight-line, branching and looping programs, generated together
//! with their own def/use and successor tables so tests can compute expected
//! results without consulting the library's analyses.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

pub const REGS: [&str; 6] = ["rax", "rbx", "rcx", "rdx", "rsi", "rdi"];
pub const REGS32: [&str; 6] = ["eax", "ebx", "ecx", "edx", "esi", "edi"];

/// Location written or read: a register index into `REGS`, or the flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Place {
    Reg(usize),
    Flags,
}

#[derive(Debug, Clone)]
pub struct GenInst {
    pub text: String,
    pub reads: BTreeSet<Place>,
    pub write: Option<Place>,
    /// Loads or stores memory (lea does not).
    pub mem: bool,
    pub branch: Option<Branch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Cond(usize),
    Jump(usize),
    Halt,
}

#[derive(Debug, Clone)]
pub struct GenProgram {
    pub insts: Vec<GenInst>,
}

impl GenProgram {
    pub fn source(&self) -> String {
        let mut s = String::new();
        for (i, inst) in self.insts.iter().enumerate() {
            s.push_str(&format!("L{i}: {}\n", inst.text));
        }
        s
    }

    pub fn successors(&self, k: usize) -> Vec<usize> {
        let n = self.insts.len();
        let next = (k + 1 < n).then_some(k + 1);
        let mut out: Vec<usize> = match self.insts[k].branch {
            None => next.into_iter().collect(),
            Some(Branch::Halt) => vec![],
            Some(Branch::Jump(t)) => vec![t],
            Some(Branch::Cond(t)) => next.into_iter().chain([t]).collect(),
        };
        out.dedup();
        out
    }
}

fn reg<R: Rng>(rng: &mut R) -> usize {
    rng.gen_range(0..REGS.len())
}

fn inst(text: String, reads: &[Place], write: Option<Place>, mem: bool) -> GenInst {
    GenInst {
        text,
        reads: reads.iter().copied().collect(),
        write,
        mem,
        branch: None,
    }
}

/// A random program of `len` instructions with at most `max_branches`
/// control transfers. `mem_bias` in [0, 1] raises the share of loads and stores.
pub fn random_program<R: Rng>(rng: &mut R, len: usize, max_branches: usize, mem_bias: f64) -> GenProgram {
    use Place::*;
    let mut insts = Vec::with_capacity(len);
    let mut branch_slots: Vec<usize> = (0..len).collect();
    branch_slots.shuffle(rng);
    let branches: BTreeSet<usize> = branch_slots.into_iter().take(rng.gen_range(0..=max_branches.min(len))).collect();
    for k in 0..len {
        if branches.contains(&k) {
            let t = rng.gen_range(0..len);
            let (text, b, reads) = match rng.gen_range(0..10) {
                0 => ("halt".to_string(), Branch::Halt, vec![]),
                1 | 2 => (format!("jmp L{t}"), Branch::Jump(t), vec![]),
                _ => {
                    let m = ["je", "jne", "jl", "jge"].choose(rng).unwrap();
                    (format!("{m} L{t}"), Branch::Cond(t), vec![Flags])
                }
            };
            let mut g = inst(text, &reads, None, false);
            g.branch = Some(b);
            insts.push(g);
            continue;
        }
        let (a, b, c) = (reg(rng), reg(rng), reg(rng));
        let (ra, rb, rc) = (REGS[a], REGS[b], REGS[c]);
        let imm = rng.gen_range(-64i64..64) * 8;
        let g = if rng.gen_bool(mem_bias) {
            match rng.gen_range(0..5) {
                0 => inst(format!("mov {ra}, [{rb}+{}]", imm.abs()), &[Reg(b)], Some(Reg(a)), true),
                1 => inst(format!("mov {ra}, [{rb}+{rc}*8]"), &[Reg(b), Reg(c)], Some(Reg(a)), true),
                2 => inst(format!("mov [{rb}+{}], {ra}", imm.abs()), &[Reg(b), Reg(a)], None, true),
                3 => inst(format!("mov {}, [{rb}]", REGS32[a]), &[Reg(b)], Some(Reg(a)), true),
                _ => inst(format!("add {ra}, [{rb}+{rc}*8]"), &[Reg(a), Reg(b), Reg(c)], Some(Reg(a)), true),
            }
        } else {
            match rng.gen_range(0..12) {
                0 => inst(format!("mov {ra}, {imm}"), &[], Some(Reg(a)), false),
                1 => inst(format!("mov {ra}, {rb}"), &[Reg(b)], Some(Reg(a)), false),
                2 => inst(format!("mov {}, {}", REGS32[a], REGS32[b]), &[Reg(b)], Some(Reg(a)), false),
                3 => {
                    let op = ["add", "sub", "imul", "and", "or", "xor"].choose(rng).unwrap();
                    inst(format!("{op} {ra}, {rb}"), &[Reg(a), Reg(b)], Some(Reg(a)), false)
                }
                4 => inst(format!("add {ra}, {imm}"), &[Reg(a)], Some(Reg(a)), false),
                5 => inst(format!("inc {ra}"), &[Reg(a)], Some(Reg(a)), false),
                6 => inst(format!("dec {ra}"), &[Reg(a)], Some(Reg(a)), false),
                7 | 8 => inst(format!("cmp {ra}, {rb}"), &[Reg(a), Reg(b)], Some(Flags), false),
                9 => inst(format!("cmp {ra}, {imm}"), &[Reg(a)], Some(Flags), false),
                10 => inst(format!("test {ra}, {rb}"), &[Reg(a), Reg(b)], Some(Flags), false),
                _ => inst(format!("lea {ra}, [{rb}+{rc}*8]"), &[Reg(b), Reg(c)], Some(Reg(a)), false),
            }
        };
        insts.push(g);
    }
    GenProgram { insts }
}

/// Reaching definitions by round-robin iteration of the gen/kill equations.
/// Returns `(producer, consumer, place)` for every use reached by a definition.
pub fn reaching_pairs(p: &GenProgram) -> BTreeSet<(usize, usize, Place)> {
    let n = p.insts.len();
    let mut preds = vec![Vec::new(); n];
    for k in 0..n {
        for s in p.successors(k) {
            preds[s].push(k);
        }
    }
    let mut input: Vec<BTreeSet<(Place, usize)>> = vec![BTreeSet::new(); n];
    let mut output: Vec<BTreeSet<(Place, usize)>> = vec![BTreeSet::new(); n];
    let mut changed = true;
    while changed {
        changed = false;
        for k in 0..n {
            let inn: BTreeSet<_> = preds[k].iter().flat_map(|&q| output[q].iter().copied()).collect();
            let out: BTreeSet<_> = match p.insts[k].write {
                Some(w) => inn.iter().copied().filter(|&(l, _)| l != w).chain([(w, k)]).collect(),
                None => inn.clone(),
            };
            if inn != input[k] || out != output[k] {
                input[k] = inn;
                output[k] = out;
                changed = true;
            }
        }
    }
    let mut pairs = BTreeSet::new();
    for (k, inst) in p.insts.iter().enumerate() {
        for &(l, q) in &input[k] {
            if inst.reads.contains(&l) {
                pairs.insert((q, k, l));
            }
        }
    }
    pairs
}

/// Fewest memory references over every maximal cycle-free path from `root`,
/// by enumerating the paths.
pub fn brute_min_access(p: &GenProgram, root: usize) -> usize {
    fn walk(p: &GenProgram, v: usize, on: &mut Vec<bool>, count: usize, best: &mut usize) {
        let count = count + p.insts[v].mem as usize;
        let succ = p.successors(v);
        if succ.is_empty() {
            *best = (*best).min(count);
            return;
        }
        on[v] = true;
        for s in succ {
            if on[s] {
                *best = (*best).min(count);
            } else {
                walk(p, s, on, count, best);
            }
        }
        on[v] = false;
    }
    let mut best = usize::MAX;
    walk(p, root, &mut vec![false; p.insts.len()], 0, &mut best);
    best
}
