//! Stage runners. Each stage reads the artifacts of earlier stages from the
//! output directory and writes its own, so any stage can be rerun alone.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::asm::{parse_program, Program};
use crate::config::PipelineConfig;
use crate::embedding::{embed_intervals, interval_sequences, l2_normalize, EmbeddingMatrix};
use crate::graph::{build_graph, export_graph, import_graph, AsmGraph};
use crate::nn::{load_checkpoint, save_checkpoint, split_dataset, train, Example, Model, TrainReport};
use crate::pca;
use crate::sampler::{
    bbv_profile, kmeans_bic, mape, mean_error, project_bbv, random_model, read_cpi, read_eval, synthetic_cpi,
    write_cpi, write_eval, write_simpoints, ClusterModel, EvalRow,
};
use crate::snapshot::{for_each_snapshot, LabelIndex, SnapshotBuilder};
use crate::tracer::{read_trace, run, write_trace, InitState, Trace};

/// Whether a failure is the caller's fault (bad input) or a broken invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    User,
    Internal,
}

#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub kind: FailureKind,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

fn user(stage: &'static str) -> impl Fn(&dyn fmt::Display) -> StageError {
    move |e| StageError {
        stage,
        kind: FailureKind::User,
        message: e.to_string(),
    }
}

fn internal(stage: &'static str) -> impl Fn(&dyn fmt::Display) -> StageError {
    move |e| StageError {
        stage,
        kind: FailureKind::Internal,
        message: e.to_string(),
    }
}

macro_rules! user_err {
    ($stage:expr, $e:expr) => {
        $e.map_err(|e| user($stage)(&e))
    };
}

macro_rules! internal_err {
    ($stage:expr, $e:expr) => {
        $e.map_err(|e| internal($stage)(&e))
    };
}

/// Artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Artifacts {
            dir: cfg.paths.out.clone(),
        }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn trace(&self) -> PathBuf {
        self.file("trace.txt")
    }
    pub fn graph(&self) -> PathBuf {
        self.file("graph.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.file("model.ckpt")
    }
    pub fn train_log(&self) -> PathBuf {
        self.file("train_log.csv")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.file("embeddings.bin")
    }
    pub fn embedding_index(&self) -> PathBuf {
        self.file("embeddings.csv")
    }
    pub fn clusters(&self) -> PathBuf {
        self.file("clusters.csv")
    }
    pub fn simpoints(&self) -> PathBuf {
        self.file("simpoints.csv")
    }
    pub fn bbv_clusters(&self) -> PathBuf {
        self.file("bbv_clusters.csv")
    }
    pub fn bbv_simpoints(&self) -> PathBuf {
        self.file("bbv_simpoints.csv")
    }
    pub fn cpi(&self) -> PathBuf {
        self.file("cpi.csv")
    }
    pub fn eval(&self) -> PathBuf {
        self.file("eval.csv")
    }
    pub fn bbv_eval(&self) -> PathBuf {
        self.file("bbv_eval.csv")
    }
    pub fn random_eval(&self) -> PathBuf {
        self.file("random_eval.csv")
    }
    pub fn comparison(&self) -> PathBuf {
        self.file("compare.csv")
    }
    pub fn pca(&self) -> PathBuf {
        self.file("pca.csv")
    }
}

fn remove(paths: &[PathBuf]) {
    for p in paths {
        let _ = fs::remove_file(p);
    }
}

/// Runs `f`; on failure deletes `outputs` so no partial artifact survives.
fn guarded<R>(outputs: &[PathBuf], f: impl FnOnce() -> Result<R, StageError>) -> Result<R, StageError> {
    let r = f();
    if r.is_err() {
        remove(outputs);
    }
    r
}

pub fn load_program(cfg: &PipelineConfig) -> Result<Program, StageError> {
    const S: &str = "parse";
    let text = fs::read_to_string(&cfg.paths.asm)
        .map_err(|e| user(S)(&format!("{}: {e}", cfg.paths.asm.display())))?;
    user_err!(S, parse_program(&text))
}

fn ensure_out(cfg: &PipelineConfig, stage: &'static str) -> Result<Artifacts, StageError> {
    let a = Artifacts::new(cfg);
    user_err!(stage, fs::create_dir_all(&a.dir))?;
    Ok(a)
}

pub fn stage_trace(cfg: &PipelineConfig) -> Result<Trace, StageError> {
    let a = ensure_out(cfg, "trace")?;
    trace_to(cfg, &a.trace())
}

/// Executes the configured program and writes its trace to `out`.
pub fn trace_to(cfg: &PipelineConfig, out: &Path) -> Result<Trace, StageError> {
    const S: &str = "trace";
    let p = load_program(cfg)?;
    let init = match &cfg.paths.init {
        Some(path) => user_err!(S, InitState::load(path))?,
        None => InitState::default(),
    };
    guarded(&[out.to_owned()], || {
        let t = user_err!(S, run(&p, &init.machine_state(&p), cfg.trace.max_instructions))?;
        user_err!(S, write_trace(&t, out))?;
        Ok(t)
    })
}

pub fn stage_graph(cfg: &PipelineConfig) -> Result<AsmGraph, StageError> {
    const S: &str = "build-graph";
    let p = load_program(cfg)?;
    let a = ensure_out(cfg, S)?;
    guarded(&[a.graph()], || {
        let (g, _) = build_graph(&p);
        user_err!(S, export_graph(&g, &a.graph()))?;
        Ok(g)
    })
}

fn inputs(cfg: &PipelineConfig, stage: &'static str) -> Result<(Program, AsmGraph, Trace, Artifacts), StageError> {
    let p = load_program(cfg)?;
    let a = ensure_out(cfg, stage)?;
    let g = user_err!(stage, import_graph(&a.graph()))?;
    let t = user_err!(stage, read_trace(&a.trace()))?;
    if t.program_hash != p.content_hash() {
        return Err(user(stage)(&"trace was recorded for a different program"));
    }
    Ok((p, g, t, a))
}

/// Labelled snapshots for training, spread evenly over the trace.
pub fn training_examples(p: &Program, g: &AsmGraph, t: &Trace, cadence: u64, cap: usize) -> Result<Vec<Example>, StageError> {
    const S: &str = "train";
    let cadence = if cap > 0 {
        cadence.max((t.len() as u64).div_ceil(cap as u64))
    } else {
        cadence
    };
    let labels = LabelIndex::new(t);
    let mut b = SnapshotBuilder::new(p, g);
    let mut out = Vec::new();
    internal_err!(
        S,
        for_each_snapshot(&mut b, t, cadence as usize, Some(&labels), |s| {
            out.extend(Example::from_snapshot(&s));
            Ok(())
        })
    )?;
    if cap > 0 {
        out.truncate(cap);
    }
    Ok(out)
}

pub fn stage_train(cfg: &PipelineConfig, mut on_epoch: impl FnMut(&crate::nn::EpochStats)) -> Result<TrainReport, StageError> {
    const S: &str = "train";
    let (p, g, t, a) = inputs(cfg, S)?;
    guarded(&[a.checkpoint(), a.train_log()], || {
        let data = training_examples(&p, &g, &t, cfg.training.cadence, cfg.training.max_examples)?;
        if data.is_empty() {
            return Err(user(S)(&"the trace yields no labelled snapshots"));
        }
        let (tr, te) = split_dataset(data.len(), cfg.model.train_fraction, cfg.model.seed);
        let train_set: Vec<Example> = tr.iter().map(|&i| data[i].clone()).collect();
        let test_set: Vec<Example> = te.iter().map(|&i| data[i].clone()).collect();
        let mut model = user_err!(S, Model::<f32>::new(cfg.model.clone()))?;
        let report = user_err!(S, train(&mut model, &train_set, &test_set, None, &mut on_epoch))?;
        user_err!(S, save_checkpoint(&model, &a.checkpoint()))?;
        let mut log = String::from("epoch,train_loss,train_accuracy,test_accuracy\n");
        for e in &report.epochs {
            log.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.train_accuracy, e.test_accuracy));
        }
        user_err!(S, fs::write(a.train_log(), log))?;
        Ok(report)
    })
}

pub fn stage_embed(cfg: &PipelineConfig) -> Result<EmbeddingMatrix, StageError> {
    const S: &str = "embed";
    let (p, g, t, a) = inputs(cfg, S)?;
    guarded(&[a.embeddings(), a.embedding_index()], || {
        let model: Model<f32> = user_err!(S, load_checkpoint(&a.checkpoint(), Some(&cfg.model)))?;
        let mut b = SnapshotBuilder::new(&p, &g);
        let seqs = internal_err!(S, interval_sequences(&model, &mut b, &t, &cfg.interval))?;
        let mut m = user_err!(S, embed_intervals(&seqs, cfg.embedding.aggregation, &cfg.embedding.autoencoder))?;
        if cfg.embedding.normalize {
            l2_normalize(&mut m.rows);
        }
        if !m.is_finite() {
            return Err(internal(S)(&"non-finite interval embedding"));
        }
        user_err!(S, m.save(&a.embeddings(), &a.embedding_index()))?;
        Ok(m)
    })
}

fn write_assignment(path: &Path, m: &ClusterModel) -> std::io::Result<()> {
    let mut s = String::from("interval,cluster\n");
    for (i, c) in m.assignment.iter().enumerate() {
        s.push_str(&format!("{i},{c}\n"));
    }
    fs::write(path, s)
}

/// Reassembles a clustering from `clusters.csv` and `simpoints.csv`.
pub fn read_clustering(assignment: &Path, simpoints: &Path) -> Result<ClusterModel, String> {
    let num = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("{s}: {e}"));
    let text = fs::read_to_string(assignment).map_err(|e| format!("{}: {e}", assignment.display()))?;
    let mut assign = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 2 || num(f[0])? != assign.len() {
            return Err(format!("{}: bad row `{line}`", assignment.display()));
        }
        assign.push(num(f[1])?);
    }
    let k = assign.iter().max().map_or(0, |m| m + 1);
    let mut reps = vec![None; k];
    let text = fs::read_to_string(simpoints).map_err(|e| format!("{}: {e}", simpoints.display()))?;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(format!("{}: bad row `{line}`", simpoints.display()));
        }
        let c = num(f[0])?;
        if c >= k {
            return Err(format!("{}: cluster {c} has no members", simpoints.display()));
        }
        reps[c] = Some(num(f[1])?);
    }
    if assign.iter().any(|&c| reps[c].is_none()) {
        return Err("an assigned cluster lacks a representative".into());
    }
    Ok(ClusterModel {
        k,
        centroids: Vec::new(),
        assignment: assign,
        representatives: reps,
        bic: Vec::new(),
    })
}

/// Clusterings of the NPS embeddings and of the BBVs.
pub struct Sampled {
    pub nps: ClusterModel,
    pub bbv: ClusterModel,
}

pub fn bbv_rows(cfg: &PipelineConfig, p: &Program, t: &Trace) -> Result<Vec<Vec<f64>>, StageError> {
    let rows = user_err!("sample", bbv_profile(t, p, cfg.interval.interval_length))?;
    Ok(if cfg.baseline.bbv_projection > 0 {
        project_bbv(&rows, cfg.baseline.bbv_projection, cfg.sampler.seed)
    } else {
        rows
    })
}

pub fn stage_sample(cfg: &PipelineConfig) -> Result<Sampled, StageError> {
    const S: &str = "sample";
    let (p, _, t, a) = inputs(cfg, S)?;
    let outputs = [a.clusters(), a.simpoints(), a.bbv_clusters(), a.bbv_simpoints()];
    guarded(&outputs, || {
        let m = user_err!(S, EmbeddingMatrix::load(&a.embeddings(), &a.embedding_index()))?;
        let nps = internal_err!(S, kmeans_bic(&m.rows_f64(), &cfg.sampler))?;
        user_err!(S, write_assignment(&a.clusters(), &nps))?;
        user_err!(S, write_simpoints(&a.simpoints(), &nps))?;
        let bbv = internal_err!(S, kmeans_bic(&bbv_rows(cfg, &p, &t)?, &cfg.sampler))?;
        user_err!(S, write_assignment(&a.bbv_clusters(), &bbv))?;
        user_err!(S, write_simpoints(&a.bbv_simpoints(), &bbv))?;
        Ok(Sampled { nps, bbv })
    })
}

/// Short digest identifying the cost model settings.
pub fn cost_tag(cfg: &PipelineConfig) -> String {
    let text = toml::to_string(&cfg.cost).expect("cost model serializes");
    let d = Sha256::digest(text.as_bytes());
    d[..6].iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Evaluation {
    pub nps: EvalRow,
    pub bbv: EvalRow,
    pub random: Vec<EvalRow>,
    pub random_median_mape: f64,
}

fn eval_row(cfg: &PipelineConfig, method: &str, cpi: &[f64], m: &ClusterModel, seed: u64) -> Result<EvalRow, StageError> {
    Ok(EvalRow {
        method: method.into(),
        k: m.k,
        maxk: cfg.sampler.maxk,
        mape: internal_err!("eval", mape(cpi, m))?,
        me: internal_err!("eval", mean_error(cpi, m))?,
        interval_length: cfg.interval.interval_length,
        intervals: cpi.len(),
        cost_model: cost_tag(cfg),
        seed,
    })
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn stage_eval(cfg: &PipelineConfig) -> Result<Evaluation, StageError> {
    const S: &str = "eval";
    let (p, _, t, a) = inputs(cfg, S)?;
    guarded(&[a.cpi(), a.eval(), a.bbv_eval(), a.random_eval()], || {
        let cpi = user_err!(S, synthetic_cpi(&t, &p, cfg.interval.interval_length, &cfg.cost))?;
        user_err!(S, write_cpi(&a.cpi(), &cpi))?;
        let cpi = user_err!(S, read_cpi(&a.cpi()))?;
        let nps = user_err!(S, read_clustering(&a.clusters(), &a.simpoints()))?;
        let bbv = user_err!(S, read_clustering(&a.bbv_clusters(), &a.bbv_simpoints()))?;
        let nps = eval_row(cfg, "nps", &cpi, &nps, cfg.sampler.seed)?;
        let bbv = eval_row(cfg, "bbv", &cpi, &bbv, cfg.sampler.seed)?;
        let mut random = Vec::with_capacity(cfg.baseline.random_runs);
        for r in 0..cfg.baseline.random_runs as u64 {
            let seed = cfg.sampler.seed.wrapping_add(1 + r);
            let m = random_model(cpi.len(), nps.k, seed);
            random.push(eval_row(cfg, "random", &cpi, &m, seed)?);
        }
        user_err!(S, write_eval(&a.eval(), std::slice::from_ref(&nps)))?;
        user_err!(S, write_eval(&a.bbv_eval(), std::slice::from_ref(&bbv)))?;
        user_err!(S, write_eval(&a.random_eval(), &random))?;
        let random_median_mape = median(&random.iter().map(|r| r.mape).collect::<Vec<_>>());
        Ok(Evaluation {
            nps,
            bbv,
            random,
            random_median_mape,
        })
    })
}

/// Writes `pca.csv` for an embedding matrix, tagging rows with their
/// cluster when an assignment is available. Returns false when every row
/// was identical.
pub fn write_pca(m: &EmbeddingMatrix, clusters: Option<&[usize]>, out: &Path) -> Result<bool, StageError> {
    const S: &str = "pca";
    let proj = pca::project(&m.rows_f64()).ok_or_else(|| user(S)(&"at least two embedding rows are required"))?;
    let mut s = String::from("interval,pc1,pc2,cluster\n");
    for (i, c) in proj.coords.iter().enumerate() {
        let cl = clusters.and_then(|a| a.get(i)).map(|c| c.to_string()).unwrap_or_default();
        s.push_str(&format!("{i},{},{},{cl}\n", c[0], c[1]));
    }
    user_err!(S, fs::write(out, s))?;
    Ok(!proj.degenerate)
}

pub fn stage_pca(cfg: &PipelineConfig) -> Result<bool, StageError> {
    const S: &str = "pca";
    let a = ensure_out(cfg, S)?;
    let m = user_err!(S, EmbeddingMatrix::load(&a.embeddings(), &a.embedding_index()))?;
    let clusters = read_clustering(&a.clusters(), &a.simpoints()).ok().map(|c| c.assignment);
    guarded(&[a.pca()], || write_pca(&m, clusters.as_deref(), &a.pca()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub label: String,
    pub mape_a: f64,
    pub mape_b: f64,
    pub me_a: f64,
    pub me_b: f64,
    /// `(mape_b − mape_a) / mape_b`; zero when both are zero.
    pub reduction: f64,
}

/// Pairs rows of two evaluation files in order. Settings must agree.
pub fn compare(a: &[EvalRow], b: &[EvalRow]) -> Result<Vec<Comparison>, String> {
    if a.len() != b.len() || a.is_empty() {
        return Err(format!("evaluation files hold {} and {} rows", a.len(), b.len()));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.interval_length != y.interval_length || x.intervals != y.intervals || x.cost_model != y.cost_model {
                return Err(format!(
                    "settings differ: interval length {} vs {}, {} vs {} intervals, cost model {} vs {}",
                    x.interval_length, y.interval_length, x.intervals, y.intervals, x.cost_model, y.cost_model
                ));
            }
            let reduction = if y.mape == 0.0 {
                if x.mape == 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                (y.mape - x.mape) / y.mape
            };
            Ok(Comparison {
                label: format!("{} vs {} (maxk {})", x.method, y.method, x.maxk),
                mape_a: x.mape,
                mape_b: y.mape,
                me_a: x.me,
                me_b: y.me,
                reduction,
            })
        })
        .collect()
}

pub fn compare_files(a: &Path, b: &Path) -> Result<Vec<Comparison>, StageError> {
    const S: &str = "compare";
    let ra = user_err!(S, read_eval(a))?;
    let rb = user_err!(S, read_eval(b))?;
    user_err!(S, compare(&ra, &rb))
}

pub fn write_comparison(rows: &[Comparison], out: &Path) -> Result<(), StageError> {
    let mut s = String::from("comparison,mape_a,mape_b,me_a,me_b,mape_reduction\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.label, r.mape_a, r.mape_b, r.me_a, r.me_b, r.reduction));
    }
    user_err!("compare", fs::write(out, s))
}

pub struct PipelineReport {
    pub train: TrainReport,
    pub embeddings: EmbeddingMatrix,
    pub sampled: Sampled,
    pub evaluation: Evaluation,
    pub comparison: Vec<Comparison>,
}

/// Every stage in order. The asm file is checked before any work starts.
pub fn run_pipeline(cfg: &PipelineConfig, on_epoch: impl FnMut(&crate::nn::EpochStats)) -> Result<PipelineReport, StageError> {
    if !cfg.paths.asm.is_file() {
        return Err(user("config")(&format!("assembly file {} does not exist", cfg.paths.asm.display())));
    }
    if let Some(init) = &cfg.paths.init {
        if !init.is_file() {
            return Err(user("config")(&format!("init file {} does not exist", init.display())));
        }
    }
    stage_trace(cfg)?;
    stage_graph(cfg)?;
    let train = stage_train(cfg, on_epoch)?;
    let embeddings = stage_embed(cfg)?;
    let sampled = stage_sample(cfg)?;
    let evaluation = stage_eval(cfg)?;
    let a = Artifacts::new(cfg);
    let comparison = compare_files(&a.eval(), &a.bbv_eval())?;
    write_comparison(&comparison, &a.comparison())?;
    stage_pca(cfg)?;
    Ok(PipelineReport {
        train,
        embeddings,
        sampled,
        evaluation,
        comparison,
    })
}
