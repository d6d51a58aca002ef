//! The typed program graph: instruction, pseudo and variable nodes joined by
//! control-flow and dataflow edges, with producer tracking for registers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asm::{Dest, Loc, MemExpr, Mnemonic, Program, Register, Source, Width};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph file parse: {0}")]
    Parse(String),
}

/// Fixed token vocabulary for instruction and pseudo nodes.
pub mod vocab {
    use crate::asm::Mnemonic;

    use super::NodeType;

    /// Upper bound on vocabulary size (model embedding table rows).
    pub const CAPACITY: usize = 300;
    const PSEUDO_BASE: u16 = 20;
    const VARIABLE_BASE: u16 = 26;
    const FLAGGED_BASE: u16 = 30;
    /// Tokens actually in use.
    pub const USED: usize = 62;

    pub fn mnemonic(m: Mnemonic) -> u16 {
        m as u16
    }

    pub fn node_type(t: NodeType) -> u16 {
        match t {
            NodeType::Inst => unreachable!("instruction tokens come from the mnemonic"),
            NodeType::Plus => PSEUDO_BASE,
            NodeType::Minus => PSEUDO_BASE + 1,
            NodeType::Times => PSEUDO_BASE + 2,
            NodeType::BitAnd => PSEUDO_BASE + 3,
            NodeType::BitOr => PSEUDO_BASE + 4,
            NodeType::MemRef => PSEUDO_BASE + 5,
            NodeType::Tmp => VARIABLE_BASE,
            NodeType::Reg => VARIABLE_BASE + 1,
            NodeType::Const => VARIABLE_BASE + 2,
            NodeType::Mem => VARIABLE_BASE + 3,
        }
    }

    /// Token for a conditional jump whose flag state (ZF|SF<<1|OF<<2) is
    /// known from runtime state rather than an in-graph producer.
    pub fn flagged_branch(m: Mnemonic, flags: u8) -> u16 {
        let k = match m {
            Mnemonic::Je => 0,
            Mnemonic::Jne => 1,
            Mnemonic::Jl => 2,
            Mnemonic::Jge => 3,
            _ => panic!("{m} is not a conditional branch"),
        };
        FLAGGED_BASE + k * 8 + (flags & 7) as u16
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeCategory {
    Instruction,
    Pseudo,
    Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Inst,
    Plus,
    Minus,
    Times,
    BitAnd,
    BitOr,
    MemRef,
    Tmp,
    Reg,
    Const,
    Mem,
}

impl NodeType {
    pub fn category(self) -> NodeCategory {
        match self {
            NodeType::Inst => NodeCategory::Instruction,
            NodeType::Plus
            | NodeType::Minus
            | NodeType::Times
            | NodeType::BitAnd
            | NodeType::BitOr
            | NodeType::MemRef => NodeCategory::Pseudo,
            NodeType::Tmp | NodeType::Reg | NodeType::Const | NodeType::Mem => {
                NodeCategory::Variable
            }
        }
    }

    fn is_arith(self) -> bool {
        matches!(
            self,
            NodeType::Plus | NodeType::Minus | NodeType::Times | NodeType::BitAnd | NodeType::BitOr
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    CfFallthrough,
    CfBranch,
    DfSrcLeft,
    DfSrcRight,
    DfCompute,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 5] = [
        EdgeKind::CfFallthrough,
        EdgeKind::CfBranch,
        EdgeKind::DfSrcLeft,
        EdgeKind::DfSrcRight,
        EdgeKind::DfCompute,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_control(self) -> bool {
        matches!(self, EdgeKind::CfFallthrough | EdgeKind::CfBranch)
    }

    pub fn is_data(self) -> bool {
        !self.is_control()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Node {
    pub id: usize,
    pub ty: NodeType,
    pub token: u16,
    pub reg: Option<Register>,
    pub value: Option<i64>,
    pub inst_index: usize,
}

impl Node {
    pub fn category(&self) -> NodeCategory {
        self.ty.category()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsmGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    /// Instruction index to its instruction node id.
    pub inst_node: Vec<usize>,
}

/// Per-instruction producer sets: `U_K` holds `(location, producer index)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProducerBook {
    pub sets: Vec<BTreeSet<(Loc, usize)>>,
}

impl ProducerBook {
    pub fn producers_of(&self, consumer: usize, loc: Loc) -> impl Iterator<Item = usize> + '_ {
        self.sets[consumer]
            .iter()
            .filter(move |(l, _)| *l == loc)
            .map(|&(_, p)| p)
    }
}

impl AsmGraph {
    fn push_node(&mut self, ty: NodeType, inst_index: usize) -> usize {
        let id = self.nodes.len();
        let token = match ty {
            NodeType::Inst => 0,
            t => vocab::node_type(t),
        };
        self.nodes.push(Node {
            id,
            ty,
            token,
            reg: None,
            value: None,
            inst_index,
        });
        id
    }

    fn push_edge(&mut self, src: usize, dst: usize, kind: EdgeKind) {
        self.edges.push(Edge { src, dst, kind });
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Outgoing adjacency lists `(dst, kind)`, in edge insertion order.
    pub fn out_adjacency(&self) -> Vec<Vec<(usize, EdgeKind)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.src].push((e.dst, e.kind));
        }
        adj
    }

    pub fn in_adjacency(&self) -> Vec<Vec<(usize, EdgeKind)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.dst].push((e.src, e.kind));
        }
        adj
    }

    /// Producer/consumer pairs realised as dataflow edges, as
    /// `(producer instruction, consumer instruction, location)`.
    pub fn dataflow_pairs(&self) -> BTreeSet<(usize, usize, Loc)> {
        let in_adj = self.in_adjacency();
        let out_deg = {
            let mut d = vec![0usize; self.nodes.len()];
            for e in &self.edges {
                d[e.src] += 1;
            }
            d
        };
        let is_inst = |n: usize| self.nodes[n].ty == NodeType::Inst;
        let mut pairs = BTreeSet::new();
        for e in &self.edges {
            if e.kind != EdgeKind::DfCompute {
                continue;
            }
            let dst = &self.nodes[e.dst];
            if is_inst(e.src) && is_inst(e.dst) {
                pairs.insert((self.nodes[e.src].inst_index, dst.inst_index, Loc::Flags));
            } else if dst.ty == NodeType::Reg && out_deg[e.dst] > 0 {
                let gpr = dst.reg.expect("reg node carries a register").gpr;
                if is_inst(e.src) {
                    pairs.insert((self.nodes[e.src].inst_index, dst.inst_index, Loc::Reg(gpr)));
                } else if self.nodes[e.src].ty == NodeType::BitAnd {
                    for &(p, k) in &in_adj[e.src] {
                        if k == EdgeKind::DfSrcLeft && is_inst(p) {
                            pairs.insert((self.nodes[p].inst_index, dst.inst_index, Loc::Reg(gpr)));
                        }
                    }
                }
            }
        }
        pairs
    }

    /// Content hash over the canonical serialized form.
    pub fn structural_hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_json().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile::from_graph(self);
        serde_json::to_string_pretty(&file).expect("graph serialises")
    }

    pub fn from_json(text: &str) -> Result<AsmGraph, GraphError> {
        let file: GraphFile =
            serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        file.into_graph()
    }
}

/// Builds the instruction nodes and control-flow edges only.
pub fn build_backbone(p: &Program) -> AsmGraph {
    let mut g = AsmGraph {
        nodes: Vec::new(),
        edges: Vec::new(),
        inst_node: Vec::with_capacity(p.len()),
    };
    for inst in &p.instructions {
        let id = g.push_node(NodeType::Inst, inst.index);
        g.nodes[id].token = vocab::mnemonic(inst.mnemonic);
        g.inst_node.push(id);
    }
    for inst in &p.instructions {
        let i = inst.index;
        if !inst.mnemonic.ends_flow() && i + 1 < p.len() {
            g.push_edge(g.inst_node[i], g.inst_node[i + 1], EdgeKind::CfFallthrough);
        }
        if let Some(t) = inst.branch_target() {
            g.push_edge(g.inst_node[i], g.inst_node[t], EdgeKind::CfBranch);
        }
    }
    g
}

/// For every instruction writing a location, walks the control-flow graph
/// breadth-first and records the writer in the book of every reader reached
/// before the location is overwritten.
pub fn compute_producers(p: &Program, g: &AsmGraph) -> ProducerBook {
    let n = p.len();
    let succ: Vec<Vec<usize>> = {
        let mut s = vec![Vec::new(); n];
        for e in &g.edges {
            if e.kind.is_control() {
                let (a, b) = (g.nodes[e.src].inst_index, g.nodes[e.dst].inst_index);
                if !s[a].contains(&b) {
                    s[a].push(b);
                }
            }
        }
        s
    };
    let reads: Vec<Vec<Loc>> = p.instructions.iter().map(|i| i.reads()).collect();
    let writes: Vec<Option<Loc>> = p.instructions.iter().map(|i| i.writes()).collect();
    let mut sets = vec![BTreeSet::new(); n];
    for producer in 0..n {
        let Some(loc) = writes[producer] else { continue };
        let mut seen = vec![false; n];
        let mut queue: VecDeque<usize> = succ[producer].iter().copied().collect();
        for &s in &succ[producer] {
            seen[s] = true;
        }
        while let Some(k) = queue.pop_front() {
            if reads[k].contains(&loc) {
                sets[k].insert((loc, producer));
            }
            if writes[k] == Some(loc) {
                continue;
            }
            for &s in &succ[k] {
                if !seen[s] {
                    seen[s] = true;
                    queue.push_back(s);
                }
            }
        }
    }
    ProducerBook { sets }
}

struct Builder<'a> {
    g: AsmGraph,
    p: &'a Program,
    /// (consumer instruction, source reg node)
    consumers: Vec<(usize, usize)>,
}

impl<'a> Builder<'a> {
    fn reg_node(&mut self, k: usize, r: Register) -> usize {
        let id = self.g.push_node(NodeType::Reg, k);
        self.g.nodes[id].reg = Some(r);
        id
    }

    fn const_node(&mut self, k: usize, v: i64) -> usize {
        let id = self.g.push_node(NodeType::Const, k);
        self.g.nodes[id].value = Some(v);
        id
    }

    /// A source register read: the reg node, masked by a bitand when read
    /// through its 32-bit alias. Returns the node feeding the consumer.
    fn source_reg(&mut self, k: usize, r: Register) -> usize {
        let node = self.reg_node(k, r);
        self.consumers.push((k, node));
        if r.width == Width::W32 {
            self.mask32(k, node)
        } else {
            node
        }
    }

    fn mask32(&mut self, k: usize, input: usize) -> usize {
        let and = self.g.push_node(NodeType::BitAnd, k);
        let mask = self.const_node(k, 0xFFFF_FFFF);
        self.g.push_edge(input, and, EdgeKind::DfSrcLeft);
        self.g.push_edge(mask, and, EdgeKind::DfSrcRight);
        and
    }

    /// Arithmetic pseudo outputs feeding another pseudo are materialised in a
    /// tmp node.
    fn feed(&mut self, k: usize, node: usize) -> usize {
        if self.g.nodes[node].ty.is_arith() {
            let tmp = self.g.push_node(NodeType::Tmp, k);
            self.g.push_edge(node, tmp, EdgeKind::DfCompute);
            tmp
        } else {
            node
        }
    }

    fn binary(&mut self, k: usize, ty: NodeType, left: usize, right: usize) -> usize {
        let op = self.g.push_node(ty, k);
        let l = self.feed(k, left);
        let r = self.feed(k, right);
        self.g.push_edge(l, op, EdgeKind::DfSrcLeft);
        self.g.push_edge(r, op, EdgeKind::DfSrcRight);
        op
    }

    /// Grows the address computation of `m`; returns the node holding the
    /// address.
    fn address(&mut self, k: usize, m: &MemExpr) -> usize {
        let mut acc: Option<usize> = None;
        if let Some(b) = m.base {
            acc = Some(self.source_reg(k, Register::r64(b)));
        }
        if let Some(i) = m.index {
            let reg = self.source_reg(k, Register::r64(i));
            let term = if m.scale > 1 {
                let sc = self.const_node(k, m.scale as i64);
                self.binary(k, NodeType::Times, reg, sc)
            } else {
                reg
            };
            acc = Some(match acc {
                Some(a) => self.binary(k, NodeType::Plus, a, term),
                None => term,
            });
        }
        match acc {
            None => self.const_node(k, m.disp),
            Some(a) if m.disp == 0 => a,
            Some(a) => {
                let (ty, mag) = if m.disp < 0 {
                    (NodeType::Minus, m.disp.wrapping_neg())
                } else {
                    (NodeType::Plus, m.disp)
                };
                let c = self.const_node(k, mag);
                self.binary(k, ty, a, c)
            }
        }
    }

    /// Expression tree rooted at a mem_ref with its attached mem node.
    /// Returns the mem node.
    fn memory(&mut self, k: usize, m: &MemExpr) -> usize {
        let inst = self.g.inst_node[k];
        let root = self.g.push_node(NodeType::MemRef, k);
        self.g.push_edge(inst, root, EdgeKind::CfFallthrough);
        let addr = self.address(k, m);
        self.g.push_edge(addr, root, EdgeKind::DfSrcLeft);
        let mem = self.g.push_node(NodeType::Mem, k);
        self.g.push_edge(root, mem, EdgeKind::DfCompute);
        mem
    }

    fn instruction(&mut self, k: usize) {
        let inst = &self.p.instructions[k];
        let node = self.g.inst_node[k];
        let positions = [EdgeKind::DfSrcLeft, EdgeKind::DfSrcRight];
        if inst.mnemonic == Mnemonic::Lea {
            let m = *inst.mem_operand().expect("lea has a memory operand");
            let a = self.address(k, &m);
            self.g.push_edge(a, node, EdgeKind::DfSrcLeft);
        }
        for (pos, src) in inst.sources().into_iter().enumerate() {
            let feed = match src {
                Source::Reg(r) => self.source_reg(k, r),
                Source::Imm(v) => self.const_node(k, v),
                Source::Mem(m) => {
                    let m = *m;
                    self.memory(k, &m)
                }
                Source::Flags => continue,
            };
            self.g.push_edge(feed, node, positions[pos]);
        }
        match inst.dest() {
            Some(Dest::Reg(r)) => {
                let d = self.reg_node(k, r);
                self.g.push_edge(node, d, EdgeKind::DfCompute);
            }
            Some(Dest::Mem(m)) => {
                let m = *m;
                let mem = self.memory(k, &m);
                self.g.push_edge(node, mem, EdgeKind::DfCompute);
            }
            Some(Dest::Flags) | None => {}
        }
    }
}

/// Attaches operand nodes, expression trees and producer edges to a backbone.
pub fn grow_dataflow(p: &Program, g: AsmGraph, book: &ProducerBook) -> AsmGraph {
    let mut b = Builder {
        g,
        p,
        consumers: Vec::new(),
    };
    for k in 0..p.len() {
        b.instruction(k);
    }
    let consumers = std::mem::take(&mut b.consumers);
    for (k, node) in consumers {
        let r = b.g.nodes[node].reg.expect("consumer is a reg node");
        for prod in book.producers_of(k, Loc::Reg(r.gpr)) {
            let pnode = b.g.inst_node[prod];
            let narrow = p.instructions[prod].write_width() == Some(Width::W32);
            if narrow && r.width == Width::W64 {
                let and = b.mask32(k, pnode);
                b.g.push_edge(and, node, EdgeKind::DfCompute);
            } else {
                b.g.push_edge(pnode, node, EdgeKind::DfCompute);
            }
        }
    }
    for k in 0..p.len() {
        if p.instructions[k].mnemonic.is_conditional_branch() {
            for prod in book.producers_of(k, Loc::Flags).collect::<Vec<_>>() {
                let (a, c) = (b.g.inst_node[prod], b.g.inst_node[k]);
                b.g.push_edge(a, c, EdgeKind::DfCompute);
            }
        }
    }
    b.g
}

/// Full construction: backbone, producers, dataflow.
pub fn build_graph(p: &Program) -> (AsmGraph, ProducerBook) {
    let backbone = build_backbone(p);
    let book = compute_producers(p, &backbone);
    let g = grow_dataflow(p, backbone, &book);
    (g, book)
}

pub fn export_graph(g: &AsmGraph, path: &Path) -> Result<(), GraphError> {
    fs::write(path, g.to_json())?;
    Ok(())
}

pub fn import_graph(path: &Path) -> Result<AsmGraph, GraphError> {
    AsmGraph::from_json(&fs::read_to_string(path)?)
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct NodeRecord {
    pub id: usize,
    pub category: NodeCategory,
    #[serde(rename = "type")]
    pub ty: NodeType,
    pub token: u16,
    pub reg: Option<String>,
    #[serde(rename = "const")]
    pub value: Option<i64>,
    pub inst_index: usize,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct EdgeRecord {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

impl NodeRecord {
    pub(crate) fn from_node(n: &Node) -> Self {
        NodeRecord {
            id: n.id,
            category: n.category(),
            ty: n.ty,
            token: n.token,
            reg: n.reg.map(|r| r.to_string()),
            value: n.value,
            inst_index: n.inst_index,
        }
    }
}

impl GraphFile {
    fn from_graph(g: &AsmGraph) -> Self {
        GraphFile {
            nodes: g.nodes.iter().map(NodeRecord::from_node).collect(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    src: e.src,
                    dst: e.dst,
                    kind: e.kind,
                })
                .collect(),
        }
    }

    fn into_graph(self) -> Result<AsmGraph, GraphError> {
        let bad = |m: String| GraphError::Parse(m);
        let mut nodes = Vec::with_capacity(self.nodes.len());
        let mut inst: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, r) in self.nodes.into_iter().enumerate() {
            if r.id != i {
                return Err(bad(format!("node {i} has id {}", r.id)));
            }
            if r.ty.category() != r.category {
                return Err(bad(format!("node {i}: type {:?} is not in category {:?}", r.ty, r.category)));
            }
            let reg = match r.reg {
                None => None,
                Some(name) => Some(
                    Register::parse(&name)
                        .ok_or_else(|| bad(format!("node {i}: unknown register `{name}`")))?,
                ),
            };
            if r.ty == NodeType::Inst && inst.insert(r.inst_index, i).is_some() {
                return Err(bad(format!("instruction {} has two nodes", r.inst_index)));
            }
            nodes.push(Node {
                id: i,
                ty: r.ty,
                token: r.token,
                reg,
                value: r.value,
                inst_index: r.inst_index,
            });
        }
        let inst_node: Vec<usize> = inst.values().copied().collect();
        if inst.keys().enumerate().any(|(i, &k)| i != k) {
            return Err(bad("instruction indices are not dense".into()));
        }
        let mut edges = Vec::with_capacity(self.edges.len());
        for (i, e) in self.edges.into_iter().enumerate() {
            if e.src >= nodes.len() || e.dst >= nodes.len() {
                return Err(bad(format!("edge {i} references a missing node")));
            }
            edges.push(Edge {
                src: e.src,
                dst: e.dst,
                kind: e.kind,
            });
        }
        Ok(AsmGraph {
            nodes,
            edges,
            inst_node,
        })
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EdgeKind::CfFallthrough => "cf_fallthrough",
            EdgeKind::CfBranch => "cf_branch",
            EdgeKind::DfSrcLeft => "df_src_left",
            EdgeKind::DfSrcRight => "df_src_right",
            EdgeKind::DfCompute => "df_compute",
        };
        f.write_str(s)
    }
}
