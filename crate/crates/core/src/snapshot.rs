//! Graph snapshots: the part of the program graph reachable from the
//! executing instruction, unrolled into a DAG whose every code path carries
//! the same number of memory references, fused with runtime values.
//!
//! A snapshot node is an *occurrence* of an instruction along some code path
//! from the root. Two paths share an occurrence when they reach the same
//! instruction with the same number of preceding references and the same set
//! of still-relevant stack entries, so their futures are identical. This keeps
//! the snapshot acyclic and makes the reference count at every occurrence
//! unambiguous.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use smallvec::SmallVec;
use thiserror::Error;

use crate::asm::{Gpr, Loc, Mnemonic, Program, Register, Width};
use crate::graph::{vocab, AsmGraph, Edge, EdgeKind, NodeRecord, NodeType};
use crate::tracer::{MemRef, RefKind, RegisterFile, Trace, TraceRecord};

/// Upper bound on aligned memory references per snapshot.
pub const MAX_DEPTH: usize = 20;

/// Guard against path explosion on pathological control flow.
pub const MAX_OCCURRENCES: usize = 20_000;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("node {0} is not an instruction node of the graph")]
    NotInstruction(usize),
    #[error("snapshot rooted at instruction {root} exceeds {MAX_OCCURRENCES} instruction occurrences")]
    TooLarge { root: usize },
    #[error("dynamic context lacks a value for register {0}")]
    MissingRegister(&'static str),
    #[error("trace exhausted: {needed} references needed after record {seq}, {available} available")]
    TraceExhausted { seq: usize, needed: usize, available: usize },
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Trace(#[from] crate::tracer::TraceError),
}

/// Runtime values visible when the root instruction is about to execute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DynamicContext {
    pub regs: [Option<u64>; 16],
    pub flags: u8,
    /// Memory references of the root instruction itself.
    pub root_refs: SmallVec<[MemRef; 1]>,
}

impl DynamicContext {
    pub fn new(rf: &RegisterFile, rec: &TraceRecord) -> Self {
        DynamicContext {
            regs: rf.regs.map(Some),
            flags: rf.flags,
            root_refs: rec.mem.clone(),
        }
    }
}

/// Initial value source for one snapshot node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeInit {
    Token(u16),
    Value(u64),
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapNode {
    /// Program-graph node this is a copy of; `None` for width masks added
    /// by in-snapshot dataflow.
    pub origin: Option<usize>,
    pub ty: NodeType,
    pub token: u16,
    pub reg: Option<Register>,
    pub value: Option<i64>,
    pub inst_index: usize,
    pub occurrence: usize,
}

/// Value-independent part of a snapshot. Depends only on the root
/// instruction, so it is shared by every snapshot with that root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotStructure {
    pub root_inst: usize,
    pub nodes: Vec<SnapNode>,
    pub edges: Vec<Edge>,
    /// Node id of the root instruction occurrence.
    pub root: usize,
    pub d: usize,
    /// Instruction node id of every occurrence.
    pub occurrence_nodes: Vec<usize>,
    /// Task nodes (mem_ref) with their 1-based depth.
    pub depths: Vec<(usize, u8)>,
    /// Merge points where paths disagreed on the reference count.
    pub depth_conflicts: usize,
    /// Source reg nodes with no in-snapshot producer; they take runtime values.
    value_regs: Vec<(usize, Gpr)>,
    /// Conditional branches whose flag producer lies outside the snapshot.
    free_branches: Vec<(usize, Mnemonic)>,
    /// Mem node read by the root instruction, if it loads.
    root_load: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    pub structure: Arc<SnapshotStructure>,
    pub init: Vec<NodeInit>,
    /// Next `d` referenced addresses, starting with the root's own.
    pub labels: Vec<u64>,
    pub root_seq: usize,
}

impl GraphSnapshot {
    pub fn d(&self) -> usize {
        self.structure.d
    }

    pub fn depth_mask(&self) -> [bool; MAX_DEPTH] {
        depth_mask(self.structure.d)
    }

    pub fn is_trainable(&self) -> bool {
        self.structure.d > 0 && self.labels.len() == self.structure.d
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            nodes: Vec<NodeRecord>,
            edges: Vec<crate::graph::EdgeRecord>,
            root: usize,
            #[serde(rename = "D")]
            d: usize,
            node_init: &'a [NodeInit],
            depths: Vec<[usize; 2]>,
            labels: Vec<String>,
        }
        let s = &self.structure;
        let dump = Dump {
            nodes: s
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| NodeRecord {
                    id,
                    category: n.ty.category(),
                    ty: n.ty,
                    token: n.token,
                    reg: n.reg.map(|r| r.to_string()),
                    value: n.value,
                    inst_index: n.inst_index,
                })
                .collect(),
            edges: s
                .edges
                .iter()
                .map(|e| crate::graph::EdgeRecord {
                    src: e.src,
                    dst: e.dst,
                    kind: e.kind,
                })
                .collect(),
            root: s.root,
            d: s.d,
            node_init: &self.init,
            depths: s.depths.iter().map(|&(n, d)| [n, d as usize]).collect(),
            labels: self.labels.iter().map(|a| format!("{a:#x}")).collect(),
        };
        serde_json::to_string_pretty(&dump).expect("snapshot serialises")
    }

    pub fn dump(&self, path: &Path) -> Result<(), SnapshotError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

pub fn depth_mask(d: usize) -> [bool; MAX_DEPTH] {
    let mut m = [false; MAX_DEPTH];
    m[..d.min(MAX_DEPTH)].fill(true);
    m
}

/// Small bitset over instruction indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Bits(SmallVec<[u64; 2]>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(SmallVec::from_elem(0, n.div_ceil(64).max(1)))
    }

    fn has(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn and(&self, o: &Bits) -> Bits {
        Bits(self.0.iter().zip(&o.0).map(|(a, b)| a & b).collect())
    }
}

/// Per-instruction copy recipe: the instruction node plus its own operand
/// and expression nodes, without cross-instruction producer edges.
#[derive(Debug, Clone)]
struct Template {
    nodes: Vec<usize>,
    edges: Vec<(usize, usize, EdgeKind)>,
    /// Source reg nodes (local index) awaiting producers.
    sources: Vec<(usize, Register)>,
    mem_ref: Option<usize>,
    load_mem: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct OccKey {
    inst: usize,
    refs_before: u8,
}

/// Precomputed per-program tables for snapshot extraction, with a cache of
/// structures by root instruction.
pub struct SnapshotBuilder<'a> {
    program: &'a Program,
    graph: &'a AsmGraph,
    succ: Vec<SmallVec<[(usize, EdgeKind); 2]>>,
    refs: Vec<u8>,
    /// Instructions reachable in one or more steps.
    reach: Vec<Bits>,
    templates: Vec<Template>,
    cache: HashMap<usize, Arc<SnapshotStructure>>,
}

fn loc_slot(l: Loc) -> usize {
    match l {
        Loc::Reg(g) => g.index(),
        Loc::Flags => 16,
    }
}

impl<'a> SnapshotBuilder<'a> {
    pub fn new(program: &'a Program, graph: &'a AsmGraph) -> Self {
        let n = program.len();
        let mut succ = vec![SmallVec::new(); n];
        for e in &graph.edges {
            if e.kind.is_control()
                && graph.nodes[e.src].ty == NodeType::Inst
                && graph.nodes[e.dst].ty == NodeType::Inst
            {
                let (a, b) = (graph.nodes[e.src].inst_index, graph.nodes[e.dst].inst_index);
                succ[a].push((b, e.kind));
            }
        }
        let refs = program
            .instructions
            .iter()
            .map(|i| i.accesses_memory() as u8)
            .collect();
        let reach = (0..n)
            .map(|v| {
                let mut seen = Bits::new(n);
                let mut stack: Vec<usize> = succ[v].iter().map(|&(s, _)| s).collect();
                while let Some(x) = stack.pop() {
                    if !seen.has(x) {
                        seen.set(x);
                        stack.extend(succ[x].iter().map(|&(s, _)| s));
                    }
                }
                seen
            })
            .collect();
        let templates = build_templates(graph, n);
        SnapshotBuilder {
            program,
            graph,
            succ,
            refs,
            reach,
            templates,
            cache: HashMap::new(),
        }
    }

    pub fn program(&self) -> &'a Program {
        self.program
    }

    /// Minimum memory-reference count over all maximal cycle-free code paths
    /// from `root`. A path ends where its next instruction is already on the
    /// path, or where control leaves the program.
    pub fn min_access(&self, root: usize) -> usize {
        let mut memo = HashMap::new();
        let empty = Bits::new(self.program.len());
        self.min_from(root, &empty, &mut memo) as usize
    }

    fn min_from(&self, v: usize, stack: &Bits, memo: &mut HashMap<(usize, Bits), u32>) -> u32 {
        let key = (v, stack.and(&self.reach[v]));
        if let Some(&m) = memo.get(&key) {
            return m;
        }
        let mut below = key.1.clone();
        below.set(v);
        let mut best: Option<u32> = None;
        for &(s, _) in &self.succ[v] {
            let tail = if below.has(s) {
                0
            } else {
                self.min_from(s, &below, memo)
            };
            best = Some(best.map_or(tail, |b| b.min(tail)));
        }
        let m = self.refs[v] as u32 + best.unwrap_or(0);
        memo.insert(key, m);
        m
    }

    /// Snapshot structure rooted at program-graph node `n_cur`.
    pub fn structure_at_node(&mut self, n_cur: usize) -> Result<Arc<SnapshotStructure>, SnapshotError> {
        match self.graph.nodes.get(n_cur) {
            Some(n) if n.ty == NodeType::Inst => self.structure(n.inst_index),
            _ => Err(SnapshotError::NotInstruction(n_cur)),
        }
    }

    pub fn structure(&mut self, root: usize) -> Result<Arc<SnapshotStructure>, SnapshotError> {
        if root >= self.program.len() {
            return Err(SnapshotError::NotInstruction(root));
        }
        if let Some(s) = self.cache.get(&root) {
            return Ok(s.clone());
        }
        let s = Arc::new(self.build(root)?);
        self.cache.insert(root, s.clone());
        Ok(s)
    }

    fn build(&self, root: usize) -> Result<SnapshotStructure, SnapshotError> {
        let d = self.min_access(root).min(MAX_DEPTH);

        // unroll occurrences breadth-first
        let n = self.program.len();
        let mut keys: Vec<(OccKey, Bits)> = Vec::new();
        let mut index: HashMap<(OccKey, Bits), usize> = HashMap::new();
        let mut cf: Vec<(usize, usize, EdgeKind)> = Vec::new();
        let root_key = (
            OccKey {
                inst: root,
                refs_before: 0,
            },
            Bits::new(n),
        );
        index.insert(root_key.clone(), 0);
        keys.push(root_key);
        let mut queue = VecDeque::from([0usize]);
        while let Some(o) = queue.pop_front() {
            let (key, stack) = keys[o].clone();
            let v = key.inst;
            let mut below = stack;
            below.set(v);
            let k = key.refs_before as usize + self.refs[v] as usize;
            for &(s, kind) in &self.succ[v] {
                if below.has(s) || k + self.refs[s] as usize > d {
                    continue;
                }
                let child = (
                    OccKey {
                        inst: s,
                        refs_before: k as u8,
                    },
                    below.and(&self.reach[s]),
                );
                let c = match index.get(&child) {
                    Some(&c) => c,
                    None => {
                        let c = keys.len();
                        if c >= MAX_OCCURRENCES {
                            return Err(SnapshotError::TooLarge { root });
                        }
                        index.insert(child.clone(), c);
                        keys.push(child);
                        queue.push_back(c);
                        c
                    }
                };
                cf.push((o, c, kind));
            }
        }

        // copy each occurrence's operand nodes
        let mut nodes: Vec<SnapNode> = Vec::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut occurrence_nodes = Vec::with_capacity(keys.len());
        let mut sources: Vec<Vec<(usize, Register)>> = Vec::with_capacity(keys.len());
        let mut root_load = None;
        for (o, (key, _)) in keys.iter().enumerate() {
            let t = &self.templates[key.inst];
            let base = nodes.len();
            for &gid in &t.nodes {
                let g = &self.graph.nodes[gid];
                nodes.push(SnapNode {
                    origin: Some(gid),
                    ty: g.ty,
                    token: g.token,
                    reg: g.reg,
                    value: g.value,
                    inst_index: g.inst_index,
                    occurrence: o,
                });
            }
            for &(a, b, kind) in &t.edges {
                edges.push(Edge {
                    src: base + a,
                    dst: base + b,
                    kind,
                });
            }
            occurrence_nodes.push(base);
            sources.push(t.sources.iter().map(|&(l, r)| (base + l, r)).collect());
            if o == 0 {
                root_load = t.load_mem.map(|l| base + l);
            }
        }
        for &(a, b, kind) in &cf {
            edges.push(Edge {
                src: occurrence_nodes[a],
                dst: occurrence_nodes[b],
                kind,
            });
        }

        // reaching definitions inside the unrolled DAG
        let order = topo_order(keys.len(), &cf).expect("occurrence graph is acyclic");
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); keys.len()];
        for &(a, b, _) in &cf {
            if !preds[b].contains(&a) {
                preds[b].push(a);
            }
        }
        let writes: Vec<Option<Loc>> = keys
            .iter()
            .map(|(k, _)| self.program.instructions[k.inst].writes())
            .collect();
        let mut reaching: Vec<[Vec<usize>; 17]> = vec![Default::default(); keys.len()];
        for &o in &order {
            let mut acc: [Vec<usize>; 17] = Default::default();
            for &p in &preds[o] {
                for (slot, defs) in acc.iter_mut().enumerate() {
                    if writes[p].map(loc_slot) == Some(slot) {
                        defs.push(p);
                    } else {
                        defs.extend_from_slice(&reaching[p][slot]);
                    }
                }
            }
            for defs in &mut acc {
                defs.sort_unstable();
                defs.dedup();
            }
            reaching[o] = acc;
        }

        let mut value_regs = Vec::new();
        let mut free_branches = Vec::new();
        for o in 0..keys.len() {
            let inst = &self.program.instructions[keys[o].0.inst];
            for &(node, r) in &sources[o] {
                if reaching[o][r.gpr.index()].is_empty() {
                    value_regs.push((node, r.gpr));
                }
                for &p in &reaching[o][r.gpr.index()] {
                    let pnode = occurrence_nodes[p];
                    let narrow = self.program.instructions[keys[p].0.inst].write_width() == Some(Width::W32);
                    if narrow && r.width == Width::W64 {
                        let and = push_synthetic(&mut nodes, NodeType::BitAnd, None, inst.index, o);
                        let mask = push_synthetic(&mut nodes, NodeType::Const, Some(0xFFFF_FFFF), inst.index, o);
                        edges.push(Edge { src: pnode, dst: and, kind: EdgeKind::DfSrcLeft });
                        edges.push(Edge { src: mask, dst: and, kind: EdgeKind::DfSrcRight });
                        edges.push(Edge { src: and, dst: node, kind: EdgeKind::DfCompute });
                    } else {
                        edges.push(Edge { src: pnode, dst: node, kind: EdgeKind::DfCompute });
                    }
                }
            }
            if inst.mnemonic.is_conditional_branch() {
                let flags = &reaching[o][16];
                for &p in flags {
                    edges.push(Edge {
                        src: occurrence_nodes[p],
                        dst: occurrence_nodes[o],
                        kind: EdgeKind::DfCompute,
                    });
                }
                if flags.is_empty() {
                    free_branches.push((occurrence_nodes[o], inst.mnemonic));
                }
            }
        }

        let mut s = SnapshotStructure {
            root_inst: root,
            nodes,
            edges,
            root: 0,
            d,
            occurrence_nodes,
            depths: Vec::new(),
            depth_conflicts: 0,
            value_regs,
            free_branches,
            root_load,
        };
        assign_depths(&mut s);
        Ok(s)
    }

    /// Full snapshot for a trace position: structure, initial values, and
    /// labels when `labels` is given.
    pub fn extract(
        &mut self,
        root: usize,
        ctx: &DynamicContext,
        root_seq: usize,
        labels: Option<&LabelIndex>,
    ) -> Result<GraphSnapshot, SnapshotError> {
        let structure = self.structure(root)?;
        let init = node_initialize(&structure, ctx)?;
        let mut s = GraphSnapshot {
            structure,
            init,
            labels: Vec::new(),
            root_seq,
        };
        if let Some(li) = labels {
            make_labels(&mut s, li, root_seq)?;
        }
        Ok(s)
    }
}

fn push_synthetic(nodes: &mut Vec<SnapNode>, ty: NodeType, value: Option<i64>, inst: usize, occ: usize) -> usize {
    nodes.push(SnapNode {
        origin: None,
        ty,
        token: vocab::node_type(ty),
        reg: None,
        value,
        inst_index: inst,
        occurrence: occ,
    });
    nodes.len() - 1
}

fn build_templates(g: &AsmGraph, n: usize) -> Vec<Template> {
    let in_adj = g.in_adjacency();
    let mut out_deg = vec![0usize; g.nodes.len()];
    for e in &g.edges {
        out_deg[e.src] += 1;
    }
    let is_inst = |x: usize| g.nodes[x].ty == NodeType::Inst;
    // width masks between a producer and a consumer belong to the dataflow
    // relation, not to the consumer's operands
    let mut producer_side = vec![false; g.nodes.len()];
    for node in &g.nodes {
        if node.ty == NodeType::BitAnd
            && in_adj[node.id]
                .iter()
                .any(|&(src, k)| k == EdgeKind::DfSrcLeft && is_inst(src))
        {
            producer_side[node.id] = true;
            for &(src, k) in &in_adj[node.id] {
                if k == EdgeKind::DfSrcRight {
                    producer_side[src] = true;
                }
            }
        }
    }
    let mut local: Vec<Option<usize>> = vec![None; g.nodes.len()];
    let mut templates: Vec<Template> = (0..n)
        .map(|i| {
            local[g.inst_node[i]] = Some(0);
            Template {
                nodes: vec![g.inst_node[i]],
                edges: Vec::new(),
                sources: Vec::new(),
                mem_ref: None,
                load_mem: None,
            }
        })
        .collect();
    for node in &g.nodes {
        if node.ty == NodeType::Inst || producer_side[node.id] {
            continue;
        }
        let t = &mut templates[node.inst_index];
        local[node.id] = Some(t.nodes.len());
        t.nodes.push(node.id);
    }
    for e in &g.edges {
        let (Some(a), Some(b)) = (local[e.src], local[e.dst]) else {
            continue;
        };
        if producer_side[e.src] || producer_side[e.dst] {
            continue;
        }
        let (si, di) = (g.nodes[e.src].inst_index, g.nodes[e.dst].inst_index);
        if si != di || (is_inst(e.src) && is_inst(e.dst)) {
            continue;
        }
        // producer edge into a source register of the same instruction
        if is_inst(e.src) && g.nodes[e.dst].ty == NodeType::Reg && out_deg[e.dst] > 0 {
            continue;
        }
        templates[si].edges.push((a, b, e.kind));
    }
    for t in &mut templates {
        for (l, &gid) in t.nodes.iter().enumerate() {
            let node = &g.nodes[gid];
            match node.ty {
                NodeType::Reg if out_deg[gid] > 0 => t.sources.push((l, node.reg.unwrap())),
                NodeType::MemRef => t.mem_ref = Some(l),
                NodeType::Mem => {
                    // a load's mem node feeds the instruction
                    let feeds_inst = t.edges.iter().any(|&(a, b, _)| a == l && b == 0);
                    if feeds_inst {
                        t.load_mem = Some(l);
                    }
                }
                _ => {}
            }
        }
    }
    templates
}

fn topo_order(n: usize, edges: &[(usize, usize, EdgeKind)]) -> Option<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    let mut out = vec![Vec::new(); n];
    for &(a, b, _) in edges {
        indeg[b] += 1;
        out[a].push(b);
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &w in &out[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                queue.push_back(w);
            }
        }
    }
    (order.len() == n).then_some(order)
}

fn instruction_cf(s: &SnapshotStructure) -> (Vec<usize>, Vec<(usize, usize, EdgeKind)>) {
    let mut id_of = vec![usize::MAX; s.nodes.len()];
    let inst: Vec<usize> = (0..s.nodes.len())
        .filter(|&i| s.nodes[i].ty == NodeType::Inst)
        .collect();
    for (k, &i) in inst.iter().enumerate() {
        id_of[i] = k;
    }
    let edges = s
        .edges
        .iter()
        .filter(|e| e.kind.is_control() && id_of[e.src] != usize::MAX && id_of[e.dst] != usize::MAX)
        .map(|e| (id_of[e.src], id_of[e.dst], e.kind))
        .collect();
    (inst, edges)
}

fn mem_ref_of(s: &SnapshotStructure) -> HashMap<usize, usize> {
    s.edges
        .iter()
        .filter(|e| {
            e.kind == EdgeKind::CfFallthrough
                && s.nodes[e.src].ty == NodeType::Inst
                && s.nodes[e.dst].ty == NodeType::MemRef
        })
        .map(|e| (e.src, e.dst))
        .collect()
}

/// Depth of every task node: one plus the number of task nodes before it on
/// a path from the root. Where merging paths disagree the minimum is kept and
/// the conflict counted.
pub fn assign_depths(s: &mut SnapshotStructure) {
    let (inst, cf) = instruction_cf(s);
    let mem_ref = mem_ref_of(s);
    let order = topo_order(inst.len(), &cf).expect("snapshot control flow is acyclic");
    let refs = |k: usize| mem_ref.contains_key(&inst[k]) as usize;
    let mut lo = vec![usize::MAX; inst.len()];
    let mut hi = vec![0usize; inst.len()];
    let root_k = inst.iter().position(|&i| i == s.root).expect("root is an instruction");
    lo[root_k] = 0;
    let mut out = vec![Vec::new(); inst.len()];
    for &(a, b, _) in &cf {
        out[a].push(b);
    }
    for &k in &order {
        if lo[k] == usize::MAX {
            continue;
        }
        let after = (lo[k] + refs(k), hi[k] + refs(k));
        for &w in &out[k] {
            lo[w] = lo[w].min(after.0);
            hi[w] = hi[w].max(after.1);
        }
    }
    s.depths.clear();
    s.depth_conflicts = 0;
    for (k, &i) in inst.iter().enumerate() {
        if let Some(&m) = mem_ref.get(&i) {
            if lo[k] == usize::MAX {
                continue;
            }
            if lo[k] != hi[k] {
                s.depth_conflicts += 1;
            }
            s.depths.push((m, (lo[k] + 1) as u8));
        }
    }
}

/// Initial value source per node. Instruction and pseudo nodes take their
/// token; registers without an in-snapshot producer take the runtime value;
/// the root's loaded word is filled in; everything else starts at zero.
pub fn node_initialize(s: &SnapshotStructure, ctx: &DynamicContext) -> Result<Vec<NodeInit>, SnapshotError> {
    let mut init: Vec<NodeInit> = s
        .nodes
        .iter()
        .map(|n| match n.ty {
            NodeType::Tmp | NodeType::Mem | NodeType::Reg => NodeInit::Zero,
            NodeType::Const => NodeInit::Value(n.value.expect("const carries a literal") as u64),
            _ => NodeInit::Token(n.token),
        })
        .collect();
    for &(node, g) in &s.value_regs {
        let v = ctx.regs[g.index()].ok_or(SnapshotError::MissingRegister(g.name64()))?;
        init[node] = NodeInit::Value(v);
    }
    for &(b, m) in &s.free_branches {
        init[b] = NodeInit::Token(vocab::flagged_branch(m, ctx.flags));
    }
    if let Some(m) = s.root_load {
        if let Some(r) = ctx.root_refs.iter().find(|r| r.kind == RefKind::Load) {
            init[m] = NodeInit::Value(r.data);
        }
    }
    Ok(init)
}

/// Flattened memory references of a trace, for label lookup.
#[derive(Debug, Clone, Default)]
pub struct LabelIndex {
    /// Index into `addrs` of the first reference of each record.
    start: Vec<usize>,
    addrs: Vec<u64>,
}

impl LabelIndex {
    pub fn new(t: &Trace) -> Self {
        let mut start = Vec::with_capacity(t.len() + 1);
        let mut addrs = Vec::new();
        for r in &t.records {
            start.push(addrs.len());
            addrs.extend(r.mem.iter().map(|m| m.addr));
        }
        start.push(addrs.len());
        LabelIndex { start, addrs }
    }

    /// Next `d` referenced addresses from record `seq` on.
    pub fn next(&self, seq: usize, d: usize) -> Result<&[u64], SnapshotError> {
        let from = self.start[seq];
        let available = self.addrs.len() - from;
        if available < d {
            return Err(SnapshotError::TraceExhausted { seq, needed: d, available });
        }
        Ok(&self.addrs[from..from + d])
    }
}

pub fn make_labels(s: &mut GraphSnapshot, li: &LabelIndex, root_seq: usize) -> Result<(), SnapshotError> {
    s.labels = li.next(root_seq, s.structure.d)?.to_vec();
    Ok(())
}

/// Topological sort over instruction nodes and control-flow edges.
pub fn check_acyclic(s: &SnapshotStructure) -> bool {
    let (inst, cf) = instruction_cf(s);
    topo_order(inst.len(), &cf).is_some()
}

/// Memory-reference counts of every maximal root path, or `None` when there
/// are more than `limit` paths.
pub fn path_ref_counts(s: &SnapshotStructure, limit: usize) -> Option<Vec<usize>> {
    let (inst, cf) = instruction_cf(s);
    let mem_ref = mem_ref_of(s);
    let mut out = vec![Vec::new(); inst.len()];
    for &(a, b, _) in &cf {
        out[a].push(b);
    }
    let root = inst.iter().position(|&i| i == s.root)?;
    let mut counts = Vec::new();
    let mut stack = vec![(root, 0usize)];
    while let Some((v, c)) = stack.pop() {
        let c = c + mem_ref.contains_key(&inst[v]) as usize;
        if out[v].is_empty() {
            counts.push(c);
            if counts.len() > limit {
                return None;
            }
        }
        for &w in &out[v] {
            stack.push((w, c));
        }
    }
    Some(counts)
}

/// Iterates snapshots at a fixed cadence over a trace by replaying it.
pub fn for_each_snapshot(
    builder: &mut SnapshotBuilder<'_>,
    trace: &Trace,
    cadence: usize,
    labels: Option<&LabelIndex>,
    mut f: impl FnMut(GraphSnapshot) -> Result<(), SnapshotError>,
) -> Result<(), SnapshotError> {
    let program = builder.program();
    let mut replay = crate::tracer::Replayer::new(program, trace)?;
    let mut seq = 0;
    while seq < trace.len() {
        replay.advance_to(seq)?;
        let rec = &trace.records[seq];
        let ctx = DynamicContext::new(replay.registers(), rec);
        let mut snap = builder.extract(rec.inst_index as usize, &ctx, seq, None)?;
        if let Some(li) = labels {
            // exhausted traces leave the snapshot unlabelled
            let _ = make_labels(&mut snap, li, seq);
        }
        f(snap)?;
        seq += cadence;
    }
    Ok(())
}

/// Convenience: the full register set at a position, for ad-hoc extraction.
pub fn context_at(program: &Program, trace: &Trace, seq: usize) -> Result<DynamicContext, crate::tracer::TraceError> {
    let mut r = crate::tracer::Replayer::new(program, trace)?;
    r.advance_to(seq)?;
    Ok(DynamicContext::new(r.registers(), &trace.records[seq]))
}
