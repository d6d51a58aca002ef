use std::sync::Arc;

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::asm::parse_program;
use crate::graph::build_graph;
use crate::snapshot::{for_each_snapshot, LabelIndex, SnapshotBuilder};
use crate::tracer::{run, MachineState};

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        node_dim: 8,
        heads: 2,
        mlp_hidden: 8,
        seed,
        learning_rate: 1e-2,
        epochs: 1,
        ..ModelConfig::desk()
    }
}

/// Labelled examples from every position of a small program's trace.
fn examples(src: &str, max: u64) -> Vec<Example> {
    let p = parse_program(src).unwrap();
    let (g, _) = build_graph(&p);
    let t = run(&p, &MachineState::for_program(&p), max).unwrap();
    let li = LabelIndex::new(&t);
    let mut b = SnapshotBuilder::new(&p, &g);
    let mut out = Vec::new();
    for_each_snapshot(&mut b, &t, 1, Some(&li), |s| {
        out.extend(Example::from_snapshot(&s));
        Ok(())
    })
    .unwrap();
    out
}

const WALK: &str = ".data 0x1000 1, 2, 3, 4\nO: mov rsi, 0x1000\nmov rdi, 0x1020\n\
    L: mov eax, [rsi]\nmov rbx, rax\nadd rsi, 8\ncmp rsi, rdi\njl L\njmp O";

/// Input with explicit nodes, tokens and edges.
fn handmade(n: usize, tokens: &[(usize, u16)], edges: &[(usize, usize, EdgeKind)], tasks: &[(usize, usize)], d: usize) -> GraphInput {
    let mut e = vec![(Vec::new(), Vec::new()); EdgeKind::COUNT];
    for &(a, b, k) in edges {
        e[k.index()].0.push(a);
        e[k.index()].1.push(b);
    }
    GraphInput {
        node_count: n,
        token_nodes: tokens.iter().map(|t| t.0).collect(),
        tokens: tokens.iter().map(|t| t.1).collect(),
        value_nodes: Arc::from(vec![]),
        values: vec![],
        edges: e.into_iter().map(|(a, b)| (a.into(), b.into())).collect(),
        task_nodes: tasks.iter().map(|t| t.0).collect(),
        task_depth: tasks.iter().map(|t| t.1).collect(),
        d,
    }
}

#[test]
fn embedding_of_values_and_zeros() {
    let m = Model::<f64>::new(tiny(3)).unwrap();
    let mut g = handmade(3, &[], &[], &[], 0);
    g.value_nodes = Arc::from(vec![0, 1]);
    g.values = vec![0, 5];
    let mut tape = Tape::new();
    let pv = m.bind(&mut tape);
    let x = m.embed_nodes(&mut tape, &pv, &g).unwrap();
    let x = tape.value(x);
    let l = &m.layout;
    assert_eq!(x.row(0), m.params[l.val_b].row(0));
    assert!(x.row(2).iter().all(|&v| v == 0.0));
    // independent expansion of 5 = bits 0 and 2
    let w = &m.params[l.val_w];
    let expect = &w.row(0) + &w.row(2) + &m.params[l.val_b].row(0);
    for (a, b) in x.row(1).iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(value_bits::<f64>(&[5]).row(0).iter().take(4).copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn token_out_of_vocabulary_is_rejected() {
    let m = Model::<f64>::new(tiny(3)).unwrap();
    let g = handmade(1, &[(0, 300)], &[], &[], 0);
    assert!(matches!(m.forward(&g, None), Err(ModelError::Token { token: 300, .. })));
}

#[test]
fn isolated_node_sees_only_itself() {
    let m = Model::<f64>::new(tiny(4)).unwrap();
    let a = handmade(2, &[(0, 3), (1, 3)], &[(0, 1, EdgeKind::DfSrcLeft)], &[], 0);
    let b = handmade(1, &[(0, 3)], &[], &[], 0);
    let fa = m.forward(&a, None).unwrap();
    let fb = m.forward(&b, None).unwrap();
    // node 0 has no in-edges in either graph
    assert_eq!(fa.tape.value(fa.node_emb).row(0), fb.tape.value(fb.node_emb).row(0));
}

#[test]
fn attention_over_singleton_and_symmetric_neighbours() {
    let m = Model::<f64>::new(tiny(5)).unwrap();
    let g = handmade(
        4,
        &[(0, 1), (1, 1), (2, 7), (3, 2)],
        &[(0, 2, EdgeKind::DfSrcLeft), (1, 2, EdgeKind::DfSrcLeft), (3, 2, EdgeKind::CfBranch)],
        &[],
        0,
    );
    let f = m.forward(&g, None).unwrap();
    // first layer, in edge-kind order: the branch edge is alone, left edges
    // come from identical nodes
    let left = f.tape.value(f.attention[1]);
    for v in left.iter() {
        assert!((v - 0.5).abs() < 1e-12);
    }
    let branch = f.tape.value(f.attention[0]);
    assert!(branch.iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn attention_groups_sum_to_one_on_random_graphs() {
    let m = Model::<f64>::new(tiny(6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.gen_range(2..15);
        let tokens: Vec<(usize, u16)> = (0..n).map(|i| (i, rng.gen_range(0..62))).collect();
        let edges: Vec<_> = (0..rng.gen_range(1..40))
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), EdgeKind::ALL[rng.gen_range(0..5)]))
            .collect();
        let g = handmade(n, &tokens, &edges, &[], 0);
        let f = m.forward(&g, None).unwrap();
        let mut k = 0;
        for _layer in 0..2 {
            for kind in EdgeKind::ALL {
                let dst = &g.edges[kind.index()].1;
                if dst.is_empty() {
                    continue;
                }
                let a = f.tape.value(f.attention[k]);
                k += 1;
                let mut sums = Array2::<f64>::zeros((n, a.ncols()));
                for (e, &d) in dst.iter().enumerate() {
                    for h in 0..a.ncols() {
                        sums[[d, h]] += a[[e, h]];
                    }
                }
                for d in dst.iter() {
                    for h in 0..a.ncols() {
                        assert!((sums[[*d, h]] - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn path_selection_routing() {
    let m = Model::<f64>::new(tiny(7)).unwrap();
    let mut tape = Tape::new();
    let pv = m.bind(&mut tape);
    let emb = tape.constant(array![[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0], [3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]]);
    // one node at depth 1, two identical nodes at depth 2
    let g = handmade(3, &[], &[], &[(0, 0), (1, 1), (2, 1)], 2);
    let (routed, alpha) = m.select_path(&mut tape, &pv, &g, emb).unwrap();
    let r = tape.value(routed);
    assert_eq!(r.row(0), tape.value(emb).row(0));
    for (a, b) in r.row(1).iter().zip(tape.value(emb).row(1)) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(r.rows().into_iter().skip(2).all(|row| row.iter().all(|&v| v == 0.0)));
    let a = tape.value(alpha.unwrap());
    assert!((a[[1, 0]] - 0.5).abs() < 1e-12 && (a[[0, 0]] - 1.0).abs() < 1e-12);
    let bad = handmade(3, &[], &[], &[(0, 0)], 2);
    assert!(matches!(m.select_path(&mut tape, &pv, &bad, emb), Err(ModelError::EmptyDepth(2))));
}

#[test]
fn zero_decoder_gives_bias_logits() {
    let mut m = Model::<f64>::new(tiny(8)).unwrap();
    let l = m.layout.clone();
    m.params[l.w1].fill(0.0);
    m.params[l.w2].fill(0.0);
    m.params[l.b2].fill(0.25);
    let mut tape = Tape::new();
    let pv = m.bind(&mut tape);
    let x = tape.constant(Array2::from_elem((MAX_DEPTH, 8), 3.0));
    let logits = m.predict_addresses(&mut tape, &pv, x);
    assert!(tape.value(logits).iter().all(|&v| v == 0.25));
}

#[test]
fn loss_limits() {
    let m = Model::<f64>::new(tiny(8)).unwrap();
    let mut tape = Tape::new();
    let zero = tape.constant(Array2::zeros((MAX_DEPTH, BITS)));
    let l = m.loss(&mut tape, zero, &[1, 2, 3], 3);
    assert!((tape.scalar(l) - 64.0 * 3.0 * 2f64.ln()).abs() < 1e-9);
    let sat = label_bits::<f64>(&[0xdead, 7]).mapv(|b| if b > 0.5 { 50.0 } else { -50.0 });
    let sat = tape.constant(sat);
    let l = m.loss(&mut tape, sat, &[0xdead, 7], 2);
    assert!(tape.scalar(l) < 1e-18);
}

fn rel_err(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn gradients_match_finite_differences() {
    let ex = examples(WALK, 40);
    let ex = ex.iter().find(|e| e.input.d > 0).unwrap();
    let mut m = Model::<f64>::new(tiny(11)).unwrap();
    let (_, analytic) = m.loss_and_grad(&ex.input, &ex.labels).unwrap();
    let step = 1e-3;
    for t in 0..m.params.len() {
        let mut numeric = Mat::zeros(m.params[t].raw_dim());
        for idx in ndarray::indices(m.params[t].dim()) {
            let orig = m.params[t][idx];
            m.params[t][idx] = orig + step;
            let up = m.forward(&ex.input, Some(&ex.labels)).unwrap().loss_value().unwrap();
            m.params[t][idx] = orig - step;
            let down = m.forward(&ex.input, Some(&ex.labels)).unwrap().loss_value().unwrap();
            m.params[t][idx] = orig;
            numeric[idx] = (up - down) / (2.0 * step);
        }
        let e = rel_err(&analytic[t], &numeric);
        assert!(e < 1e-4, "{}: relative error {e}", m.names[t]);
    }
}

#[test]
fn masked_depths_do_not_affect_loss() {
    let m = Model::<f64>::new(tiny(12)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut losses = Vec::new();
    for trial in 0..3 {
        let mut tape = Tape::new();
        let pv = m.bind(&mut tape);
        let mut emb = Array2::from_shape_fn((MAX_DEPTH, 8), |(r, c)| (r * 8 + c) as f64 * 0.01);
        if trial > 0 {
            for r in 2..MAX_DEPTH {
                for c in 0..8 {
                    emb[[r, c]] = rng.gen_range(-5.0..5.0);
                }
            }
        }
        let x = tape.constant(emb);
        let logits = m.predict_addresses(&mut tape, &pv, x);
        let l = m.loss(&mut tape, logits, &[0x40, 0x48], 2);
        losses.push(tape.scalar(l));
    }
    assert_eq!(losses[0], losses[1]);
    assert_eq!(losses[0], losses[2]);
}

#[test]
fn permutation_equivariance() {
    let ex = examples(WALK, 40);
    let ex = ex.iter().find(|e| e.input.d > 0).unwrap();
    let m = Model::<f64>::new(tiny(13)).unwrap();
    let n = ex.input.node_count;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.swap(0, n / 2);
    let pg = ex.input.permuted(&perm);
    let a = m.forward(&ex.input, Some(&ex.labels)).unwrap();
    let b = m.forward(&pg, Some(&ex.labels)).unwrap();
    let (ea, eb) = (a.tape.value(a.node_emb), b.tape.value(b.node_emb));
    for i in 0..n {
        for j in 0..8 {
            assert!((ea[[i, j]] - eb[[perm[i], j]]).abs() < 1e-9);
        }
    }
    assert!((a.loss_value().unwrap() - b.loss_value().unwrap()).abs() < 1e-6);
}

#[test]
fn forward_is_deterministic() {
    let ex = &examples(WALK, 30)[3];
    let m1 = Model::<f32>::new(ModelConfig::desk()).unwrap();
    let m2 = Model::<f32>::new(ModelConfig::desk()).unwrap();
    let a = m1.forward(&ex.input, Some(&ex.labels)).unwrap();
    let b = m2.forward(&ex.input, Some(&ex.labels)).unwrap();
    assert_eq!(a.tape.value(a.logits), b.tape.value(b.logits));
}

#[test]
fn single_snapshot_loss_decreases() {
    let ex = examples(WALK, 40);
    let one = vec![ex.iter().find(|e| e.input.d > 0).unwrap().clone()];
    let mut cfg = tiny(14);
    cfg.epochs = 500;
    cfg.batch_size = 1;
    cfg.learning_rate = 3e-3;
    let mut m = Model::<f64>::new(cfg).unwrap();
    let report = train(&mut m, &one, &[], None, |_| {}).unwrap();
    let smooth: Vec<f64> = report.losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{} then {}", w[0], w[1]);
    }
    assert_eq!(prefetch_accuracy(&m, &one).unwrap(), 1.0);
}

#[test]
fn constant_address_loop_is_learned() {
    let src = ".data 0x2040 9\nmov rbx, 0x2040\nL: mov rax, [rbx]\nadd rcx, 1\njmp L";
    let data = examples(src, 200);
    let mut cfg = tiny(15);
    cfg.epochs = 200;
    cfg.batch_size = 16;
    let mut m = Model::<f32>::new(cfg).unwrap();
    train(&mut m, &data, &[], None, |_| {}).unwrap();
    for ex in &data {
        assert_eq!(m.predict(&ex.input).unwrap(), vec![0x2040; ex.input.d]);
    }
}

#[test]
fn training_is_reproducible() {
    let data = examples(WALK, 60);
    let mut cfg = tiny(16);
    cfg.epochs = 3;
    let mut a = Model::<f32>::new(cfg.clone()).unwrap();
    let mut b = Model::<f32>::new(cfg).unwrap();
    train(&mut a, &data, &[], None, |_| {}).unwrap();
    train(&mut b, &data, &[], None, |_| {}).unwrap();
    assert_eq!(a.params, b.params);
    assert!(matches!(train(&mut a, &[], &[], None, |_| {}), Err(TrainError::Empty)));
}

#[test]
fn one_wrong_bit_fails_the_snapshot() {
    let data = examples(WALK, 40);
    let m = Model::<f32>::new(tiny(17)).unwrap();
    let ex = data.iter().find(|e| e.input.d > 0).unwrap();
    let predicted = m.predict(&ex.input).unwrap();
    let mut exact = ex.clone();
    exact.labels = predicted.clone();
    assert_eq!(prefetch_accuracy(&m, std::slice::from_ref(&exact)).unwrap(), 1.0);
    exact.labels[0] ^= 1 << 17;
    assert_eq!(prefetch_accuracy(&m, std::slice::from_ref(&exact)).unwrap(), 0.0);
    let mut none = exact.clone();
    none.input.d = 0;
    assert_eq!(prefetch_accuracy(&m, &[none, exact]).unwrap(), 0.0);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let mut m = Model::<f32>::new(tiny(18)).unwrap();
    m.params[0][[0, 0]] = 1.2345678e-7;
    save_checkpoint(&m, &path).unwrap();
    let back: Model<f32> = load_checkpoint(&path, Some(&m.config)).unwrap();
    assert_eq!(back.params, m.params);
    assert!(matches!(
        load_checkpoint::<f32>(&path, Some(&ModelConfig::desk())),
        Err(CheckpointError::ConfigMismatch)
    ));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(load_checkpoint::<f32>(&path, None).is_err());
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::desk();
    c.heads = 3;
    assert!(c.validate().is_err());
    assert!(ModelConfig::paper().validate().is_ok());
    assert_eq!(ModelConfig::paper().node_dim, 256);
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let (a, b) = split_dataset(100, 0.7, 3);
    assert_eq!((a.len(), b.len()), (70, 30));
    assert_eq!(split_dataset(100, 0.7, 3), (a.clone(), b.clone()));
    let mut all: Vec<_> = a.into_iter().chain(b).collect();
    all.sort();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
}
