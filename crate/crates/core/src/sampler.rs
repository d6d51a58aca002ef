//! Simulation point selection: k-means with BIC model selection over
//! interval vectors, basic block vectors, a synthetic CPI model, and the
//! sampling error metrics.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{Mnemonic, Program};
use crate::tracer::{RefKind, Trace};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("no rows to cluster")]
    Empty,
    #[error("maxk must be at least 1")]
    MaxK,
    #[error("rows have inconsistent widths")]
    Ragged,
    #[error("interval {0} has non-positive CPI")]
    NonPositiveCpi(usize),
    #[error("{cpi} CPI values for {assigned} assigned intervals")]
    Length { cpi: usize, assigned: usize },
    #[error("interval length must be positive")]
    IntervalLength,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub maxk: usize,
    /// Fraction of the BIC range a candidate must reach to be chosen.
    pub threshold: f64,
    pub restarts: usize,
    pub seed: u64,
    pub max_iterations: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            maxk: 20,
            threshold: 0.9,
            restarts: 5,
            seed: 1,
            max_iterations: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Row closest to each centroid; `None` for a cluster left empty.
    pub representatives: Vec<Option<usize>>,
    /// `(k, BIC)` for every candidate tried.
    pub bic: Vec<(usize, f64)>,
}

impl ClusterModel {
    /// Representative row of each row's cluster.
    pub fn representative_of(&self, row: usize) -> usize {
        self.representatives[self.assignment[row]].expect("assigned clusters are non-empty")
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    /// `(cluster, representative, weight)` for non-empty clusters.
    pub fn simpoints(&self) -> Vec<(usize, usize, f64)> {
        let n = self.assignment.len() as f64;
        self.cluster_sizes()
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s > 0)
            .map(|(c, s)| (c, self.representatives[c].unwrap(), s as f64 / n))
            .collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = dist2(x, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![rows[rng.gen_range(0..rows.len())].clone()];
    let mut d: Vec<f64> = rows.iter().map(|r| dist2(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut i = 0;
            while i + 1 < d.len() && (u >= d[i] || d[i] == 0.0) {
                u -= d[i];
                i += 1;
            }
            // floating leftovers can walk past the last positive weight
            if d[i] == 0.0 {
                i = d.iter().rposition(|&x| x > 0.0).unwrap();
            }
            i
        } else {
            rng.gen_range(0..rows.len())
        };
        centroids.push(rows[pick].clone());
        for (di, r) in d.iter_mut().zip(rows) {
            *di = di.min(dist2(r, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// One k-means run: k-means++ seeding, then Lloyd iterations until every
/// centroid moves less than 1e-8 or `max_iter` is reached. Empty clusters
/// keep their previous centroid.
pub fn kmeans(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng, max_iter: usize) -> KMeans {
    let dim = rows[0].len();
    let mut centroids = plus_plus(rows, k, rng);
    let mut assignment = vec![0; rows.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut inertia = 0.0;
        for (a, r) in assignment.iter_mut().zip(rows) {
            let (c, d) = nearest(r, &centroids);
            *a = c;
            inertia += d;
        }
        history.push(inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, r) in assignment.iter().zip(rows) {
            counts[a] += 1;
            sums[a].iter_mut().zip(r).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let m: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(dist2(&m, &centroids[c]).sqrt());
            centroids[c] = m;
        }
        if shift < 1e-8 {
            break;
        }
    }
    let mut inertia = 0.0;
    for (a, r) in assignment.iter_mut().zip(rows) {
        let (c, d) = nearest(r, &centroids);
        *a = c;
        inertia += d;
    }
    history.push(inertia);
    KMeans {
        centroids,
        assignment,
        inertia,
        history,
    }
}

/// BIC of a clustering under identical spherical Gaussians with `k·(d+1)`
/// free parameters. The per-dimension variance is floored at `var_floor`.
pub fn bic(rows: &[Vec<f64>], km: &KMeans, var_floor: f64) -> f64 {
    let n = rows.len() as f64;
    let d = rows[0].len() as f64;
    let k = km.centroids.len();
    let dof = (rows.len() as f64 - k as f64).max(1.0);
    let var = (km.inertia / (dof * d)).max(var_floor);
    let mut counts = vec![0usize; k];
    for &a in &km.assignment {
        counts[a] += 1;
    }
    let mut ll = 0.0;
    for &c in &counts {
        if c > 0 {
            let c = c as f64;
            ll += c * (c / n).ln();
        }
    }
    ll -= n * d / 2.0 * (2.0 * std::f64::consts::PI * var).ln();
    ll -= km.inertia / (2.0 * var);
    let p = k as f64 * (d + 1.0);
    ll - p / 2.0 * n.ln()
}

fn check_rows(rows: &[Vec<f64>]) -> Result<(), SamplerError> {
    let first = rows.first().ok_or(SamplerError::Empty)?;
    if rows.iter().any(|r| r.len() != first.len()) {
        return Err(SamplerError::Ragged);
    }
    Ok(())
}

/// Clustering with the best of `restarts` runs per `k` in `1..=min(maxk, n)`.
pub fn kmeans_fixed(rows: &[Vec<f64>], k: usize, cfg: &SamplerConfig) -> Result<KMeans, SamplerError> {
    check_rows(rows)?;
    if k == 0 {
        return Err(SamplerError::MaxK);
    }
    let k = k.min(rows.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut best: Option<KMeans> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = kmeans(rows, k, &mut rng, cfg.max_iterations);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn representatives(rows: &[Vec<f64>], km: &KMeans) -> Vec<Option<usize>> {
    let mut reps: Vec<Option<(usize, f64)>> = vec![None; km.centroids.len()];
    for (i, (&a, r)) in km.assignment.iter().zip(rows).enumerate() {
        let d = dist2(r, &km.centroids[a]);
        if reps[a].is_none_or(|(_, bd)| d < bd) {
            reps[a] = Some((i, d));
        }
    }
    reps.into_iter().map(|r| r.map(|(i, _)| i)).collect()
}

/// Picks the smallest `k` whose BIC reaches `threshold` of the way from the
/// lowest to the highest score among the candidates.
pub fn kmeans_bic(rows: &[Vec<f64>], cfg: &SamplerConfig) -> Result<ClusterModel, SamplerError> {
    check_rows(rows)?;
    if cfg.maxk == 0 {
        return Err(SamplerError::MaxK);
    }
    let kmax = cfg.maxk.min(rows.len());
    let mut runs = Vec::with_capacity(kmax);
    for k in 1..=kmax {
        runs.push(kmeans_fixed(rows, k, cfg)?);
    }
    let floor = 1e-9 * (runs[0].inertia / (rows.len() as f64 * rows[0].len() as f64)).max(f64::MIN_POSITIVE);
    let scores: Vec<(usize, f64)> = runs.iter().enumerate().map(|(i, r)| (i + 1, bic(rows, r, floor))).collect();
    let hi = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let chosen = scores
        .iter()
        .find(|s| hi == lo || (s.1 - lo) / (hi - lo) >= cfg.threshold)
        .map(|s| s.0)
        .unwrap();
    let km = runs.swap_remove(chosen - 1);
    Ok(ClusterModel {
        k: chosen,
        representatives: representatives(rows, &km),
        centroids: km.centroids,
        assignment: km.assignment,
        bic: scores,
    })
}

/// Random baseline: `k` distinct random intervals as representatives, every
/// other interval assigned to one of them uniformly at random.
pub fn random_model(n: usize, k: usize, seed: u64) -> ClusterModel {
    let k = k.clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reps: Vec<usize> = sample(&mut rng, n, k).into_vec();
    let mut assignment: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    for (c, &r) in reps.iter().enumerate() {
        assignment[r] = c;
    }
    ClusterModel {
        k,
        centroids: Vec::new(),
        assignment,
        representatives: reps.into_iter().map(Some).collect(),
        bic: Vec::new(),
    }
}

fn check_cpi(cpi: &[f64], model: &ClusterModel) -> Result<(), SamplerError> {
    if cpi.len() != model.assignment.len() {
        return Err(SamplerError::Length {
            cpi: cpi.len(),
            assigned: model.assignment.len(),
        });
    }
    if let Some(i) = cpi.iter().position(|&c| c.is_nan() || c <= 0.0) {
        return Err(SamplerError::NonPositiveCpi(i));
    }
    Ok(())
}

fn estimates(cpi: &[f64], model: &ClusterModel) -> Result<Vec<f64>, SamplerError> {
    check_cpi(cpi, model)?;
    Ok((0..cpi.len()).map(|i| cpi[model.representative_of(i)]).collect())
}

fn check_estimates(cpi: &[f64], est: &[f64]) -> Result<(), SamplerError> {
    if cpi.len() != est.len() {
        return Err(SamplerError::Length {
            cpi: cpi.len(),
            assigned: est.len(),
        });
    }
    if let Some(i) = cpi.iter().position(|&c| c.is_nan() || c <= 0.0) {
        return Err(SamplerError::NonPositiveCpi(i));
    }
    Ok(())
}

/// Mean over intervals of `|estimate − CPI| / CPI`.
pub fn mape_of(cpi: &[f64], est: &[f64]) -> Result<f64, SamplerError> {
    check_estimates(cpi, est)?;
    let s: f64 = cpi.iter().zip(est).map(|(&c, &e)| (e - c).abs() / c).sum();
    Ok(s / cpi.len() as f64)
}

/// `|Σ (estimate − CPI)| / Σ CPI`.
pub fn mean_error_of(cpi: &[f64], est: &[f64]) -> Result<f64, SamplerError> {
    check_estimates(cpi, est)?;
    let diff: f64 = cpi.iter().zip(est).map(|(&c, &e)| e - c).sum();
    Ok(diff.abs() / cpi.iter().sum::<f64>())
}

/// MAPE with each interval estimated by its representative's CPI.
pub fn mape(cpi: &[f64], model: &ClusterModel) -> Result<f64, SamplerError> {
    mape_of(cpi, &estimates(cpi, model)?)
}

/// ME with each interval estimated by its representative's CPI.
pub fn mean_error(cpi: &[f64], model: &ClusterModel) -> Result<f64, SamplerError> {
    mean_error_of(cpi, &estimates(cpi, model)?)
}

/// Leader instruction of every instruction's basic block. Leaders are the
/// entry, branch targets and instructions following a branch or halt.
pub fn basic_blocks(p: &Program) -> Vec<usize> {
    let n = p.instructions.len();
    let mut leader = vec![false; n];
    if n > 0 {
        leader[0] = true;
        leader[p.entry.min(n - 1)] = true;
    }
    for inst in &p.instructions {
        if let Some(t) = inst.branch_target() {
            if t < n {
                leader[t] = true;
            }
        }
        if (inst.mnemonic.is_branch() || inst.mnemonic == Mnemonic::Halt) && inst.index + 1 < n {
            leader[inst.index + 1] = true;
        }
    }
    let mut block = Vec::with_capacity(n);
    let mut cur = 0;
    for (i, &l) in leader.iter().enumerate() {
        if l {
            cur = i;
        }
        block.push(cur);
    }
    block
}

/// Per-interval basic block vectors over block leaders, ordered by leader.
/// Each executed instruction counts toward its block, so a fully executed
/// block entry weighs its length. Rows sum to one.
pub fn bbv_profile(trace: &Trace, p: &Program, interval: u64) -> Result<Vec<Vec<f64>>, SamplerError> {
    if interval == 0 {
        return Err(SamplerError::IntervalLength);
    }
    let block = basic_blocks(p);
    let mut leaders: Vec<usize> = block.clone();
    leaders.dedup();
    let col: Vec<usize> = block.iter().map(|b| leaders.binary_search(b).unwrap()).collect();
    let mut out = Vec::new();
    for chunk in trace.records.chunks(interval as usize) {
        let mut v = vec![0.0; leaders.len()];
        for r in chunk {
            v[col[r.inst_index as usize]] += 1.0;
        }
        let n = chunk.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    Ok(out)
}

/// Random linear projection of BBVs to `dims` dimensions, entries uniform
/// in `[-1, 1)`.
pub fn project_bbv(rows: &[Vec<f64>], dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let Some(first) = rows.first() else { return Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m: Vec<Vec<f64>> = (0..first.len()).map(|_| (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    rows.iter()
        .map(|r| (0..dims).map(|j| r.iter().zip(&m).map(|(x, mr)| x * mr[j]).sum()).collect())
        .collect()
}

/// Cycle costs of the synthetic timing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub nop: f64,
    pub alu: f64,
    pub mul: f64,
    pub branch: f64,
    pub halt: f64,
    /// Added per memory reference that hits.
    pub hit: f64,
    /// Added per memory reference that misses.
    pub miss: f64,
    /// Direct-mapped cache geometry.
    pub cache_lines: usize,
    pub line_bytes: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            nop: 1.0,
            alu: 1.0,
            mul: 3.0,
            branch: 1.0,
            halt: 1.0,
            hit: 1.0,
            miss: 20.0,
            cache_lines: 64,
            line_bytes: 64,
        }
    }
}

impl CostModel {
    fn base(&self, m: Mnemonic) -> f64 {
        match m {
            Mnemonic::Nop => self.nop,
            Mnemonic::Imul => self.mul,
            Mnemonic::Halt => self.halt,
            m if m.is_branch() => self.branch,
            _ => self.alu,
        }
    }
}

/// Direct-mapped, write-allocate cache of line tags.
#[derive(Debug, Clone)]
pub struct Cache {
    tags: Vec<Option<u64>>,
    line_bytes: u64,
}

impl Cache {
    pub fn new(lines: usize, line_bytes: u64) -> Self {
        Cache {
            tags: vec![None; lines.max(1)],
            line_bytes: line_bytes.max(1),
        }
    }

    /// True on a hit; the line is installed either way.
    pub fn access(&mut self, addr: u64) -> bool {
        let line = addr / self.line_bytes;
        let set = (line % self.tags.len() as u64) as usize;
        let hit = self.tags[set] == Some(line);
        self.tags[set] = Some(line);
        hit
    }
}

/// CPI of each interval under `cost`. The cache starts cold and persists
/// across intervals; loads and stores are costed alike.
pub fn synthetic_cpi(trace: &Trace, p: &Program, interval: u64, cost: &CostModel) -> Result<Vec<f64>, SamplerError> {
    if interval == 0 {
        return Err(SamplerError::IntervalLength);
    }
    let mut cache = Cache::new(cost.cache_lines, cost.line_bytes);
    let mut out = Vec::new();
    for chunk in trace.records.chunks(interval as usize) {
        let mut cycles = 0.0;
        for r in chunk {
            cycles += cost.base(p.instructions[r.inst_index as usize].mnemonic);
            for m in &r.mem {
                debug_assert!(matches!(m.kind, RefKind::Load | RefKind::Store));
                cycles += if cache.access(m.addr) { cost.hit } else { cost.miss };
            }
        }
        out.push(cycles / chunk.len() as f64);
    }
    Ok(out)
}

/// One row of `eval.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub k: usize,
    pub maxk: usize,
    pub mape: f64,
    pub me: f64,
    pub interval_length: u64,
    pub intervals: usize,
    pub cost_model: String,
    pub seed: u64,
}

pub fn write_eval(path: &Path, rows: &[EvalRow]) -> Result<(), SamplerError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval(path: &Path) -> Result<Vec<EvalRow>, SamplerError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_simpoints(path: &Path, model: &ClusterModel) -> Result<(), SamplerError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cluster", "interval", "weight"])?;
    for (c, rep, weight) in model.simpoints() {
        w.write_record([c.to_string(), rep.to_string(), weight.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cpi(path: &Path, cpi: &[f64]) -> Result<(), SamplerError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["interval", "cpi"])?;
    for (i, c) in cpi.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cpi(path: &Path) -> Result<Vec<f64>, SamplerError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize::<(usize, f64)>() {
        out.push(rec?.1);
    }
    Ok(out)
}
