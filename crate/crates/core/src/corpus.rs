//! Synthetic programs: loop kernels with affine address streams for the
//! prefetch task, and a multi-phase program for sampling experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thiserror::Error;

use crate::asm::{parse_program, ParseError};
use crate::graph::build_graph;
use crate::nn::Example;
use crate::snapshot::{for_each_snapshot, LabelIndex, SnapshotBuilder, SnapshotError};
use crate::tracer::{run, InitState, TraceError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{name}: {source}")]
    Parse { name: String, source: ParseError },
    #[error("{name}: {source}")]
    Trace { name: String, source: TraceError },
    #[error("{name}: {source}")]
    Snapshot { name: String, source: SnapshotError },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusProgram {
    pub name: String,
    pub source: String,
    pub init: InitState,
}

fn program(name: String, source: String) -> CorpusProgram {
    CorpusProgram {
        name,
        source,
        init: InitState::default(),
    }
}

/// Loop kernel families used for prefetch training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// Pointer bump over one array.
    Walk,
    /// Base plus scaled index.
    Indexed,
    /// Two pointers advancing at different strides, load then store.
    Copy,
    /// Walk reading at a displacement from the pointer.
    Offset,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Walk, Kernel::Indexed, Kernel::Copy, Kernel::Offset];
}

fn base(rng: &mut ChaCha8Rng) -> u64 {
    rng.gen_range(0x100u64..0x4000) * 64
}

/// One randomly parameterised kernel. Every kernel restarts forever, so
/// traces are bounded by the instruction budget.
pub fn kernel(kind: Kernel, rng: &mut ChaCha8Rng) -> CorpusProgram {
    let len = rng.gen_range(4u64..24);
    let stride = *[8u64, 16, 24, 32].choose(rng).unwrap();
    let a = base(rng);
    let src = match kind {
        Kernel::Walk => format!(
            "O: mov rsi, {a:#x}\nmov rdi, {end:#x}\n\
             L: mov rax, [rsi]\nadd rsi, {stride}\ncmp rsi, rdi\njl L\njmp O\n",
            end = a + len * stride
        ),
        Kernel::Indexed => {
            let scale = *[1u64, 2, 4, 8].choose(rng).unwrap();
            let step = (stride / scale).max(1);
            format!(
                "O: mov rbx, {a:#x}\nmov rcx, 0\n\
                 L: mov rax, [rbx+rcx*{scale}]\nadd rcx, {step}\ncmp rcx, {n}\njl L\njmp O\n",
                n = len * step
            )
        }
        Kernel::Copy => {
            let b = base(rng);
            let dst_stride = *[8u64, 16].choose(rng).unwrap();
            format!(
                "O: mov rsi, {a:#x}\nmov rdi, {b:#x}\nmov rdx, {end:#x}\n\
                 L: mov rax, [rsi]\nmov [rdi], rax\nadd rsi, {stride}\nadd rdi, {dst_stride}\n\
                 cmp rsi, rdx\njl L\njmp O\n",
                end = a + len * stride
            )
        }
        Kernel::Offset => {
            let disp = 8 * rng.gen_range(1u64..8);
            format!(
                "O: mov rsi, {a:#x}\nmov rdi, {end:#x}\n\
                 L: mov rax, [rsi+{disp}]\nadd rsi, {stride}\ncmp rsi, rdi\njl L\njmp O\n",
                end = a + len * stride
            )
        }
    };
    program(format!("{kind:?}").to_lowercase(), src)
}

/// `count` kernels cycling through every family, parameters drawn from `seed`.
pub fn prefetch_corpus(seed: u64, count: usize) -> Vec<CorpusProgram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut p = kernel(Kernel::ALL[i % Kernel::ALL.len()], &mut rng);
            p.name = format!("{}-{i}", p.name);
            p
        })
        .collect()
}

/// Four phases with distinct kernels, repeated forever:
/// a streaming scan whose stride alternates between 8 and 64 bytes on
/// successive passes (same code, different miss rate), register-only
/// arithmetic, a small cache-resident array, and a strided store sweep.
/// Each phase runs about `phase_len` dynamic instructions.
pub fn four_phase_program(phase_len: u64) -> CorpusProgram {
    // dynamic instructions per inner iteration, used to size repeat counts
    let reps = |per_iter: u64, iters: u64| (phase_len / (per_iter * iters + 6)).max(1);
    let stream = 4096u64;
    let compute = 64u64;
    let small = 32u64;
    let sweep = 2048u64;
    let src = format!(
        "main:\n\
         mov r13, {ra}\n\
         mov rdx, 8\n\
         PA: mov rsi, 0x100000\n\
         mov rcx, 0\n\
         LA: mov rax, [rsi]\n\
         add rsi, rdx\n\
         inc rcx\n\
         cmp rcx, {stream}\n\
         jl LA\n\
         xor rdx, 72\n\
         dec r13\n\
         cmp r13, 0\n\
         jne PA\n\
         mov r13, {rb}\n\
         PB: mov rcx, 0\n\
         mov rax, 1\n\
         LB: imul rax, 3\n\
         add rax, rcx\n\
         xor rdx, rax\n\
         inc rcx\n\
         cmp rcx, {compute}\n\
         jl LB\n\
         dec r13\n\
         cmp r13, 0\n\
         jne PB\n\
         mov r13, {rc}\n\
         PC: mov rbx, 0x8000\n\
         mov rcx, 0\n\
         LC: mov rax, [rbx+rcx*8]\n\
         add rdx, rax\n\
         inc rcx\n\
         cmp rcx, {small}\n\
         jl LC\n\
         dec r13\n\
         cmp r13, 0\n\
         jne PC\n\
         mov r13, {rd}\n\
         PD: mov rdi, 0x400000\n\
         mov rcx, 0\n\
         LD: mov [rdi], rcx\n\
         add rdi, 32\n\
         inc rcx\n\
         cmp rcx, {sweep}\n\
         jl LD\n\
         dec r13\n\
         cmp r13, 0\n\
         jne PD\n\
         jmp main\n",
        ra = reps(5, stream),
        rb = reps(6, compute),
        rc = reps(5, small),
        rd = reps(5, sweep),
    );
    program("four-phase".into(), src)
}

/// Labelled examples from one program: a trace of `insts` instructions with
/// a snapshot every `cadence` records.
pub fn examples_for(p: &CorpusProgram, insts: u64, cadence: usize) -> Result<Vec<Example>, CorpusError> {
    let name = || p.name.clone();
    let prog = parse_program(&p.source).map_err(|source| CorpusError::Parse { name: name(), source })?;
    let (graph, _) = build_graph(&prog);
    let trace = run(&prog, &p.init.machine_state(&prog), insts)
        .map_err(|source| CorpusError::Trace { name: name(), source })?;
    let labels = LabelIndex::new(&trace);
    let mut builder = SnapshotBuilder::new(&prog, &graph);
    let mut out = Vec::new();
    for_each_snapshot(&mut builder, &trace, cadence, Some(&labels), |s| {
        out.extend(Example::from_snapshot(&s));
        Ok(())
    })
    .map_err(|source| CorpusError::Snapshot { name: name(), source })?;
    Ok(out)
}

/// Examples from every program in turn.
pub fn prefetch_dataset(programs: &[CorpusProgram], insts: u64, cadence: usize) -> Result<Vec<Example>, CorpusError> {
    let mut out = Vec::new();
    for p in programs {
        out.extend(examples_for(p, insts, cadence)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;
    use crate::tracer::run;

    #[test]
    fn kernels_parse_and_run() {
        for p in prefetch_corpus(7, 12) {
            let prog = parse_program(&p.source).unwrap_or_else(|e| panic!("{}: {e}\n{}", p.name, p.source));
            let t = run(&prog, &p.init.machine_state(&prog), 500).unwrap();
            assert_eq!(t.len(), 500);
            assert!(t.memory_refs().count() > 50, "{}", p.name);
        }
    }

    #[test]
    fn corpus_is_seeded() {
        assert_eq!(prefetch_corpus(3, 8), prefetch_corpus(3, 8));
        assert_ne!(prefetch_corpus(3, 8), prefetch_corpus(4, 8));
    }

    #[test]
    fn four_phases_take_turns() {
        let p = four_phase_program(20_000);
        let prog = parse_program(&p.source).unwrap();
        let t = run(&prog, &p.init.machine_state(&prog), 100_000).unwrap();
        let label = |i: u32| prog.labels.iter().find(|(_, &v)| v == i as usize).map(|(k, _)| k.clone());
        let mut order = Vec::new();
        for r in &t.records {
            if let Some(l) = label(r.inst_index) {
                if l.starts_with('L') && order.last() != Some(&l) {
                    order.push(l);
                }
            }
        }
        assert_eq!(&order[..5], &["LA", "LB", "LC", "LD", "LA"]);
    }
}
