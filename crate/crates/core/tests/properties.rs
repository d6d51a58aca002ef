mod common;

use std::collections::HashMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_program, REGS};
use nps::asm::{parse_program, Loc, Program};
use nps::embedding::{aggregate_mean, readout, Aggregation, EmbeddingMatrix};
use nps::graph::{build_graph, EdgeKind, NodeType};
use nps::pca::project;
use nps::sampler::{bbv_profile, kmeans, kmeans_bic, mape, mean_error, random_model, synthetic_cpi, CostModel, SamplerConfig};
use nps::snapshot::SnapshotBuilder;
use nps::tracer::{read_trace_from, run, write_trace_to, MachineState, Replayer, Trace};

/// Programs that never fault: every register stays a multiple of 8, so all
/// accesses are aligned, and the last instruction jumps back to the start.
fn aligned_program(seed: u64, len: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::new();
    for k in 0..len {
        let r = |rng: &mut ChaCha8Rng| REGS[rng.gen_range(0..REGS.len())];
        let (a, b, c) = (r(&mut rng), r(&mut rng), r(&mut rng));
        let imm = rng.gen_range(-32i64..32) * 8;
        let line = match rng.gen_range(0..9) {
            0 => format!("mov {a}, {}", rng.gen_range(0..512) * 8),
            1 => format!("add {a}, {imm}"),
            2 => format!("mov {a}, {b}"),
            3 => format!("lea {a}, [{b}+{c}*8]"),
            4 => format!("mov {a}, [{b}+{}]", imm.abs()),
            5 => format!("mov [{b}+{c}*8], {a}"),
            6 => format!("add {a}, {b}"),
            7 => format!("cmp {a}, {b}"),
            _ => format!("{} L{}", ["je", "jne", "jl", "jge"][rng.gen_range(0..4)], rng.gen_range(0..len)),
        };
        s.push_str(&format!("L{k}: {line}\n"));
    }
    s.push_str("jmp L0\n");
    s
}

fn traced(seed: u64, len: usize, budget: u64) -> (Program, Trace) {
    let p = parse_program(&aligned_program(seed, len)).unwrap();
    let t = run(&p, &MachineState::for_program(&p), budget).unwrap();
    (p, t)
}

fn matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-3.0..3.0))
}

fn points(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn printed_programs_reparse_identically(seed in any::<u64>(), len in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = parse_program(&random_program(&mut rng, len, 6, 0.3).source()).unwrap();
        let q = parse_program(&p.to_source()).unwrap();
        // source lines move when labels get their own line
        let shape = |x: &nps::asm::Program| -> Vec<_> {
            x.instructions.iter().map(|i| (i.index, i.mnemonic, i.operands.clone())).collect()
        };
        prop_assert_eq!(shape(&q), shape(&p));
        prop_assert_eq!(&q.labels, &p.labels);
        prop_assert_eq!((q.entry, &q.data), (p.entry, &p.data));
        prop_assert_eq!(q.to_source(), p.to_source());
        prop_assert_eq!(q.content_hash(), p.content_hash());
        for i in &p.instructions {
            if let Some(t) = i.branch_target() {
                prop_assert!(t < p.len());
            }
        }
    }

    #[test]
    fn graph_backbone_invariants(seed in any::<u64>(), len in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = parse_program(&random_program(&mut rng, len, 6, 0.4).source()).unwrap();
        let (g, _) = build_graph(&p);
        prop_assert_eq!(build_graph(&p).0.structural_hash(), g.structural_hash());
        let inst_nodes = g.nodes.iter().filter(|n| n.ty == NodeType::Inst).count();
        prop_assert_eq!(inst_nodes, p.len());
        for (k, i) in p.instructions.iter().enumerate() {
            let node = g.inst_node[k];
            let out = |kind: EdgeKind| g.edges.iter().filter(|e| e.src == node && e.kind == kind && g.nodes[e.dst].ty == NodeType::Inst).count();
            let falls = k + 1 < p.len() && !i.mnemonic.ends_flow();
            prop_assert_eq!(out(EdgeKind::CfFallthrough), falls as usize);
            if i.mnemonic.is_conditional_branch() {
                prop_assert_eq!(out(EdgeKind::CfBranch), 1);
            }
        }
        for m in g.nodes.iter().filter(|n| n.ty == NodeType::MemRef) {
            let incoming = g.edges.iter().filter(|e| e.dst == m.id && e.kind == EdgeKind::CfFallthrough).count();
            prop_assert_eq!(incoming, 1);
            // exactly one mem node hangs off each memory operand
            let mems = g.nodes.iter().filter(|n| n.ty == NodeType::Mem && n.inst_index == m.inst_index).count();
            prop_assert_eq!(mems, 1);
        }
    }

    #[test]
    fn traces_are_deterministic_and_round_trip(seed in any::<u64>(), len in 2usize..24) {
        let (p, t) = traced(seed, len, 400);
        let (_, again) = traced(seed, len, 400);
        let bytes = |t: &Trace| { let mut v = Vec::new(); write_trace_to(t, &mut v).unwrap(); v };
        prop_assert_eq!(bytes(&t), bytes(&again));
        let back = read_trace_from(&bytes(&t)[..]).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert!(t.records.iter().enumerate().all(|(i, r)| r.seq == i as u64));
        prop_assert_eq!(t.program_hash, p.content_hash());
    }

    #[test]
    fn addresses_match_register_values(seed in any::<u64>(), len in 2usize..24) {
        let (p, t) = traced(seed, len, 300);
        let mut replay = Replayer::new(&p, &t).unwrap();
        for (seq, r) in t.records.iter().enumerate() {
            replay.advance_to(seq).unwrap();
            let inst = &p.instructions[r.inst_index as usize];
            let regs = replay.registers();
            for &(loc, v) in &r.regs {
                prop_assert_eq!(regs.read(loc), v);
            }
            match inst.mem_operand() {
                Some(m) if inst.accesses_memory() => {
                    prop_assert_eq!(r.mem.len(), 1);
                    let want = m.address(|g| regs.read(Loc::Reg(g)));
                    prop_assert_eq!(r.mem[0].addr, want);
                }
                _ => prop_assert!(r.mem.is_empty()),
            }
        }
    }

    #[test]
    fn snapshot_labels_follow_the_trace(seed in any::<u64>(), len in 2usize..20) {
        let (p, t) = traced(seed, len, 300);
        let (g, _) = build_graph(&p);
        let li = nps::snapshot::LabelIndex::new(&t);
        let mut b = SnapshotBuilder::new(&p, &g);
        let refs: Vec<u64> = t.memory_refs().map(|(_, m)| m.addr).collect();
        let starts: Vec<usize> = t.records.iter().scan(0, |acc, r| { let s = *acc; *acc += r.mem.len(); Some(s) }).collect();
        let mut first = None;
        nps::snapshot::for_each_snapshot(&mut b, &t, 7, Some(&li), |s| {
            first.get_or_insert_with(|| s.clone());
            if s.labels.len() == s.d() && s.d() > 0 {
                let at = starts[s.root_seq];
                assert_eq!(&s.labels[..], &refs[at..at + s.d()]);
            }
            Ok(())
        }).unwrap();
        if let Some(s) = first {
            let mut b2 = SnapshotBuilder::new(&p, &g);
            let ctx = nps::snapshot::context_at(&p, &t, s.root_seq).unwrap();
            let again = b2.extract(t.records[s.root_seq].inst_index as usize, &ctx, s.root_seq, Some(&li)).unwrap();
            prop_assert_eq!(again, s);
        }
    }

    #[test]
    fn readout_ignores_node_order(seed in any::<u64>(), n in 1usize..20, h in 1usize..12) {
        let m = matrix(seed, n, h);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for i in (1..n).rev() { perm.swap(i, rng.gen_range(0..=i)); }
        let shuffled = Array2::from_shape_fn((n, h), |(r, c)| m[[perm[r], c]]);
        let (a, b) = (readout(&m), readout(&shuffled));
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6));
    }

    #[test]
    fn mean_ignores_order(seed in any::<u64>(), n in 1usize..20, h in 1usize..12) {
        let m = matrix(seed, n, h);
        let rows: Vec<_> = m.rows().into_iter().map(|r| r.to_owned()).collect();
        let mut rev = rows.clone();
        rev.reverse();
        let (a, b) = (aggregate_mean(&rows).unwrap(), aggregate_mean(&rev).unwrap());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    #[test]
    fn embedding_files_round_trip(seed in any::<u64>(), n in 1usize..10, h in 1usize..8) {
        let m = matrix(seed, n, h);
        let e = EmbeddingMatrix {
            h,
            mode: if seed % 2 == 0 { Aggregation::Mean } else { Aggregation::Autoencoder },
            rows: m.rows().into_iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect(),
            index: (0..n as u64).map(|i| (i * 100, 100)).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let (bin, csv) = (dir.path().join("e.bin"), dir.path().join("e.csv"));
        e.save(&bin, &csv).unwrap();
        prop_assert_eq!(EmbeddingMatrix::load(&bin, &csv).unwrap(), e);
    }

    #[test]
    fn absolute_error_bounds_mean_error(seed in any::<u64>(), n in 1usize..40, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cpi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..8.0)).collect();
        let m = random_model(n, k, seed);
        let (a, e) = (mape(&cpi, &m).unwrap(), mean_error(&cpi, &m).unwrap());
        prop_assert!(e >= 0.0 && a >= 0.0);
        let abs: f64 = (0..n).map(|i| (cpi[m.representative_of(i)] - cpi[i]).abs()).sum();
        prop_assert!(e <= abs / cpi.iter().sum::<f64>() + 1e-12);
        let exact = (0..n).all(|i| cpi[m.representative_of(i)] == cpi[i]);
        prop_assert_eq!(a == 0.0, exact);
    }

    #[test]
    fn lloyd_never_raises_inertia(seed in any::<u64>(), n in 2usize..60, d in 1usize..6, k in 1usize..6) {
        let rows = points(seed, n, d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let km = kmeans(&rows, k.min(n), &mut rng, 100);
        prop_assert!(km.history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0)));
    }

    #[test]
    fn chosen_clustering_is_well_formed(seed in any::<u64>(), n in 2usize..50, d in 1usize..5, maxk in 1usize..8) {
        let rows = points(seed, n, d);
        let m = kmeans_bic(&rows, &SamplerConfig { maxk, seed, ..SamplerConfig::default() }).unwrap();
        prop_assert!(m.k >= 1 && m.k <= maxk);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        for (c, rep) in m.representatives.iter().enumerate() {
            if let Some(r) = rep {
                let best = (0..n).filter(|&i| m.assignment[i] == c).map(|i| dist(&rows[i], &m.centroids[c])).fold(f64::INFINITY, f64::min);
                prop_assert!(dist(&rows[*r], &m.centroids[c]) <= best + 1e-12);
                prop_assert_eq!(m.assignment[*r], c);
            }
        }
        let total: f64 = m.simpoints().iter().map(|s| s.2).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bbv_rows_are_distributions(seed in any::<u64>(), len in 2usize..24, interval in 10u64..120) {
        let (p, t) = traced(seed, len, 500);
        let rows = bbv_profile(&t, &p, interval).unwrap();
        prop_assert_eq!(rows.len(), t.len().div_ceil(interval as usize));
        for r in &rows {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|&x| x >= 0.0));
        }
        let cpi = synthetic_cpi(&t, &p, interval, &CostModel::default()).unwrap();
        prop_assert_eq!(cpi.len(), rows.len());
        prop_assert!(cpi.iter().all(|&c| c >= 1.0));
    }

    #[test]
    fn pca_components_are_orthonormal(seed in any::<u64>(), n in 3usize..30, d in 2usize..8) {
        let rows = points(seed, n, d);
        let pr = project(&rows).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        prop_assert!((dot(&pr.components[0], &pr.components[0]) - 1.0).abs() < 1e-9);
        prop_assert!((dot(&pr.components[1], &pr.components[1]) - 1.0).abs() < 1e-9);
        prop_assert!(dot(&pr.components[0], &pr.components[1]).abs() < 1e-9);
        prop_assert!(pr.variances[0] >= pr.variances[1] - 1e-12);
        for c in &pr.components {
            let top = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            prop_assert!(top > 0.0);
        }
        // coordinate variance equals the reported component variance
        let var = |j: usize| pr.coords.iter().map(|c| c[j] * c[j]).sum::<f64>() / (n - 1) as f64;
        prop_assert!((var(0) - pr.variances[0]).abs() < 1e-9 * pr.variances[0].max(1.0));
    }
}

#[test]
fn distinct_reads_recorded_once() {
    let p = parse_program("mov rax, 8\nadd rax, rax\nhalt").unwrap();
    let t = run(&p, &MachineState::for_program(&p), 10).unwrap();
    let counts: HashMap<Loc, usize> = t.records[1].regs.iter().fold(HashMap::new(), |mut m, (l, _)| {
        *m.entry(*l).or_default() += 1;
        m
    });
    assert!(counts.values().all(|&c| c == 1));
}
