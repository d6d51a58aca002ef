//! Interval embeddings: graph readout per snapshot, then mean or recurrent
//! autoencoder aggregation of snapshot sequences, one vector per interval.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Mat, Tape, Var};
use crate::nn::{Adam, GraphInput, Model, ModelError};
use crate::snapshot::{for_each_snapshot, SnapshotBuilder, SnapshotError};
use crate::tracer::Trace;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot aggregate an empty sequence")]
    Empty,
    #[error("interval spec: {0}")]
    Spec(String),
    #[error("sequence of length {len} exceeds the autoencoder limit {max}")]
    TooLong { len: usize, max: usize },
    #[error("embedding width {got} does not match {expected}")]
    Width { got: usize, expected: usize },
    #[error("autoencoder training diverged at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("embedding file: {0}")]
    Format(String),
    #[error("embedding i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Autoencoder,
}

impl Aggregation {
    fn tag(self) -> u8 {
        match self {
            Aggregation::Mean => 0,
            Aggregation::Autoencoder => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Aggregation::Mean),
            1 => Some(Aggregation::Autoencoder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntervalSpec {
    /// Dynamic instructions per interval.
    pub interval_length: u64,
    /// Instructions between snapshots.
    pub cadence: u64,
    /// Snapshots per mean-aggregated chunk; 0 picks the smallest size that
    /// keeps each interval's chunk sequence within [`DEFAULT_MAX_LEN`].
    pub subsequence: usize,
}

/// Longest chunk sequence fed to the autoencoder unless configured otherwise.
pub const DEFAULT_MAX_LEN: usize = 128;

impl Default for IntervalSpec {
    fn default() -> Self {
        IntervalSpec {
            interval_length: 10_000,
            cadence: 50,
            subsequence: 0,
        }
    }
}

impl IntervalSpec {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.cadence == 0 || self.interval_length == 0 {
            return Err(EmbeddingError::Spec("interval length and cadence must be positive".into()));
        }
        if self.interval_length % self.cadence != 0 {
            return Err(EmbeddingError::Spec(format!(
                "interval length {} is not a multiple of cadence {}",
                self.interval_length, self.cadence
            )));
        }
        Ok(())
    }

    pub fn snapshots_per_interval(&self) -> usize {
        (self.interval_length / self.cadence) as usize
    }

    pub fn chunk_size(&self) -> usize {
        if self.subsequence > 0 {
            self.subsequence
        } else {
            self.snapshots_per_interval().div_ceil(DEFAULT_MAX_LEN).max(1)
        }
    }
}

/// Sum over node rows.
pub fn readout<T: Scalar>(nodes: &Mat<T>) -> Array1<T> {
    nodes.sum_axis(Axis(0))
}

pub fn aggregate_mean<T: Scalar>(xs: &[Array1<T>]) -> Result<Array1<T>, EmbeddingError> {
    let first = xs.first().ok_or(EmbeddingError::Empty)?;
    let mut acc = Array1::zeros(first.len());
    for x in xs {
        if x.len() != first.len() {
            return Err(EmbeddingError::Width {
                got: x.len(),
                expected: first.len(),
            });
        }
        acc += x;
    }
    Ok(acc / T::from_usize(xs.len()).unwrap())
}

/// Scales every row to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize(rows: &mut [Vec<f32>]) {
    for r in rows {
        let n = r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
    }
}

/// Snapshot graph embeddings of one interval, grouped into chunk means.
#[derive(Debug, Clone)]
pub struct IntervalSequence<T> {
    pub start: u64,
    pub length: u64,
    /// `chunks × h`.
    pub chunks: Mat<T>,
}

/// Walks the trace at the snapshot cadence, reads out each snapshot's graph
/// embedding, and groups them into intervals and chunk means. A trailing
/// partial interval is kept when it holds at least one snapshot.
pub fn interval_sequences<T: Scalar>(
    model: &Model<T>,
    builder: &mut SnapshotBuilder<'_>,
    trace: &Trace,
    spec: &IntervalSpec,
) -> Result<Vec<IntervalSequence<T>>, EmbeddingError> {
    spec.validate()?;
    let per = spec.snapshots_per_interval();
    let chunk = spec.chunk_size();
    let h = model.config.node_dim;
    let mut graphs: Vec<Array1<T>> = Vec::with_capacity(trace.len() / spec.cadence as usize + 1);
    let mut failure = None;
    for_each_snapshot(builder, trace, spec.cadence as usize, None, |s| {
        match model.node_embeddings(&GraphInput::from_snapshot(&s)) {
            Ok(n) => graphs.push(readout(&n)),
            Err(e) => failure = Some(e),
        }
        Ok(())
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let mut out = Vec::new();
    for (i, group) in graphs.chunks(per).enumerate() {
        let means: Vec<Array1<T>> = group.chunks(chunk).map(aggregate_mean).collect::<Result<_, _>>()?;
        let mut m = Mat::zeros((means.len(), h));
        for (r, v) in means.iter().enumerate() {
            m.row_mut(r).assign(v);
        }
        let start = i as u64 * spec.interval_length;
        out.push(IntervalSequence {
            start,
            length: spec.interval_length.min(trace.len() as u64 - start),
            chunks: m,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            epochs: 200,
            learning_rate: 3e-3,
            seed: 1,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

const GATES: [&str; 3] = ["z", "r", "n"];

/// Gated recurrent sequence autoencoder. The encoder consumes the chunk
/// means; the decoder starts from the final encoder state, runs without
/// inputs, and projects each state back to a chunk mean.
#[derive(Debug, Clone)]
pub struct Autoencoder<T> {
    pub h: usize,
    pub max_len: usize,
    pub params: Vec<Mat<T>>,
    pub names: Vec<String>,
}

// parameter positions
const ENC_W: usize = 0;
const ENC_U: usize = 3;
const ENC_B: usize = 6;
const DEC_U: usize = 9;
const DEC_B: usize = 12;
const OUT_W: usize = 15;
const OUT_B: usize = 16;

impl<T: Scalar> Autoencoder<T> {
    pub fn new(h: usize, cfg: &AutoencoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let limit = (3.0 / h as f64).sqrt();
        let square = |rng: &mut ChaCha8Rng| Mat::from_shape_fn((h, h), |_| T::from_f64(rng.gen_range(-limit..limit)).unwrap());
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (part, count) in [("enc.w", 3), ("enc.u", 3), ("enc.b", 3), ("dec.u", 3), ("dec.b", 3)] {
            for g in &GATES[..count] {
                names.push(format!("{part}{g}"));
                params.push(if part.ends_with(".b") { Mat::zeros((1, h)) } else { square(&mut rng) });
            }
        }
        names.push("out.w".into());
        params.push(square(&mut rng));
        names.push("out.b".into());
        params.push(Mat::zeros((1, h)));
        Autoencoder {
            h,
            max_len: cfg.max_len,
            params,
            names,
        }
    }

    fn step<'p>(&self, tape: &mut Tape<'p, T>, pv: &[Var], x: Option<Var>, hp: Var, u: usize, b: usize, w: usize) -> Var {
        let pre = |tape: &mut Tape<'p, T>, g: usize, state: Var| {
            let mut a = tape.matmul(state, pv[u + g]);
            if let Some(x) = x {
                let xw = tape.matmul(x, pv[w + g]);
                a = tape.add(a, xw);
            }
            tape.add_row(a, pv[b + g])
        };
        let z = pre(tape, 0, hp);
        let z = tape.sigmoid(z);
        let r = pre(tape, 1, hp);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, hp);
        let n = pre(tape, 2, rh);
        let n = tape.tanh(n);
        let diff = tape.sub(hp, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }

    /// Runs the encoder over `seqs` (equal lengths, one per batch row);
    /// returns the final states `B × h`.
    fn encode_batch<'p>(&self, tape: &mut Tape<'p, T>, pv: &[Var], seqs: &[&Mat<T>]) -> Var {
        let len = seqs[0].nrows();
        let mut state = tape.constant(Mat::zeros((seqs.len(), self.h)));
        for t in 0..len {
            let x = Mat::from_shape_fn((seqs.len(), self.h), |(r, c)| seqs[r][[t, c]]);
            let x = tape.constant(x);
            state = self.step(tape, pv, Some(x), state, ENC_U, ENC_B, ENC_W);
        }
        state
    }

    fn reconstruction_loss<'p>(&'p self, tape: &mut Tape<'p, T>, pv: &[Var], seqs: &[&Mat<T>]) -> Var {
        let len = seqs[0].nrows();
        let mut state = self.encode_batch(tape, pv, seqs);
        let mut total: Option<Var> = None;
        for t in 0..len {
            state = self.step(tape, pv, None, state, DEC_U, DEC_B, 0);
            let y = tape.matmul(state, pv[OUT_W]);
            let y = tape.add_row(y, pv[OUT_B]);
            let target = Mat::from_shape_fn((seqs.len(), self.h), |(r, c)| seqs[r][[t, c]]);
            let l = tape.mse(y, target);
            total = Some(match total {
                Some(acc) => tape.add(acc, l),
                None => l,
            });
        }
        let total = total.expect("non-empty sequence");
        tape.scale(total, T::one() / T::from_usize(len).unwrap())
    }

    fn check(&self, seq: &Mat<T>) -> Result<(), EmbeddingError> {
        if seq.nrows() == 0 {
            return Err(EmbeddingError::Empty);
        }
        if seq.nrows() > self.max_len {
            return Err(EmbeddingError::TooLong {
                len: seq.nrows(),
                max: self.max_len,
            });
        }
        if seq.ncols() != self.h {
            return Err(EmbeddingError::Width {
                got: seq.ncols(),
                expected: self.h,
            });
        }
        Ok(())
    }

    /// Final encoder state for one chunk-mean sequence (`len × h`).
    pub fn encode(&self, seq: &Mat<T>) -> Result<Array1<T>, EmbeddingError> {
        self.check(seq)?;
        let mut tape = Tape::new();
        let pv: Vec<Var> = self.params.iter().map(|p| tape.param(p)).collect();
        let s = self.encode_batch(&mut tape, &pv, &[seq]);
        Ok(tape.value(s).row(0).to_owned())
    }

    /// Mean squared reconstruction error of one sequence.
    pub fn reconstruction_error(&self, seq: &Mat<T>) -> Result<f64, EmbeddingError> {
        self.check(seq)?;
        let mut tape = Tape::new();
        let pv: Vec<Var> = self.params.iter().map(|p| tape.param(p)).collect();
        let l = self.reconstruction_loss(&mut tape, &pv, &[seq]);
        Ok(tape.scalar(l).to_f64().unwrap())
    }
}

/// Alias matching the aggregation naming used elsewhere.
pub fn aggregate_autoencoder<T: Scalar>(seq: &Mat<T>, ae: &Autoencoder<T>) -> Result<Array1<T>, EmbeddingError> {
    ae.encode(seq)
}

/// Trains with Adam, one full-batch step per group of equal-length
/// sequences per epoch. Returns the model and the mean loss per epoch.
pub fn train_autoencoder<T: Scalar>(
    seqs: &[Mat<T>],
    h: usize,
    cfg: &AutoencoderConfig,
) -> Result<(Autoencoder<T>, Vec<f64>), EmbeddingError> {
    if seqs.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    let mut ae = Autoencoder::new(h, cfg);
    let mut groups: BTreeMap<usize, Vec<&Mat<T>>> = BTreeMap::new();
    for s in seqs {
        ae.check(s)?;
        groups.entry(s.nrows()).or_default().push(s);
    }
    let mut adam = Adam::new(&ae.params, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch in groups.values() {
            let (loss, grads) = {
                let mut tape = Tape::new();
                let pv: Vec<Var> = ae.params.iter().map(|p| tape.param(p)).collect();
                let l = ae.reconstruction_loss(&mut tape, &pv, batch);
                let mut g = tape.backward(l);
                let grads: Vec<Mat<T>> = pv
                    .iter()
                    .zip(&ae.params)
                    .map(|(&v, p)| g.take(v).unwrap_or_else(|| Mat::zeros(p.raw_dim())))
                    .collect();
                (tape.scalar(l).to_f64().unwrap(), grads)
            };
            let before = ae.params.clone();
            adam.step(&mut ae.params, &grads);
            if !loss.is_finite() || ae.params.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
                ae.params = before;
                return Err(EmbeddingError::Diverged(epoch));
            }
            epoch_loss += loss * batch.len() as f64;
        }
        history.push(epoch_loss / seqs.len() as f64);
    }
    Ok((ae, history))
}

/// One embedding row per interval, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub h: usize,
    pub mode: Aggregation,
    pub rows: Vec<Vec<f32>>,
    /// `(interval start, interval length)` per row.
    pub index: Vec<(u64, u64)>,
}

const MAGIC: &[u8; 8] = b"NPSEMBED";
const VERSION: u32 = 1;

impl EmbeddingMatrix {
    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|x| x.is_finite()))
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect()
    }

    /// Writes the binary matrix to `path` and the row index CSV to `index`.
    pub fn save(&self, path: &Path, index: &Path) -> Result<(), EmbeddingError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.h as u32).to_le_bytes())?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        w.write_all(&[self.mode.tag()])?;
        for r in &self.rows {
            for x in r {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(index)?);
        writeln!(w, "row,interval_start,interval_length")?;
        for (i, (s, l)) in self.index.iter().enumerate() {
            writeln!(w, "{i},{s},{l}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, index: &Path) -> Result<Self, EmbeddingError> {
        let bad = |m: &str| EmbeddingError::Format(format!("{}: {m}", path.display()));
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let h = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(|_| bad("truncated header"))?;
        let mode = Aggregation::from_tag(tag[0]).ok_or_else(|| bad("unknown mode"))?;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::with_capacity(h);
            for _ in 0..h {
                r.read_exact(&mut b4).map_err(|_| bad("truncated rows"))?;
                row.push(f32::from_le_bytes(b4));
            }
            rows.push(row);
        }
        if r.read(&mut tag)? != 0 {
            return Err(bad("trailing bytes"));
        }
        let bad_index = |m: &str| EmbeddingError::Format(format!("{}: {m}", index.display()));
        let mut idx = Vec::with_capacity(n);
        for (i, line) in BufReader::new(File::open(index)?).lines().enumerate() {
            let line = line?;
            if i == 0 {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| s.trim().parse::<u64>().map_err(|_| bad_index("bad number"));
            if f.len() != 3 || parse(f[0])? != (i - 1) as u64 {
                return Err(bad_index("bad row"));
            }
            idx.push((parse(f[1])?, parse(f[2])?));
        }
        if idx.len() != n {
            return Err(bad_index("row count mismatch"));
        }
        Ok(EmbeddingMatrix { h, mode, rows, index: idx })
    }
}

/// Shifts and scales every feature to zero mean and unit variance over all
/// chunks of all sequences. Constant features become zero.
pub fn standardize<T: Scalar>(seqs: &mut [Mat<T>]) {
    let Some(h) = seqs.first().map(|m| m.ncols()) else { return };
    let n: usize = seqs.iter().map(|m| m.nrows()).sum();
    if n == 0 {
        return;
    }
    let mut mean = vec![0.0f64; h];
    let mut var = vec![0.0f64; h];
    for m in seqs.iter() {
        for r in m.rows() {
            for (j, x) in r.iter().enumerate() {
                mean[j] += x.to_f64().unwrap();
            }
        }
    }
    mean.iter_mut().for_each(|x| *x /= n as f64);
    for m in seqs.iter() {
        for r in m.rows() {
            for (j, x) in r.iter().enumerate() {
                var[j] += (x.to_f64().unwrap() - mean[j]).powi(2);
            }
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / n as f64).sqrt();
            if sd > 1e-12 { 1.0 / sd } else { 0.0 }
        })
        .collect();
    for m in seqs.iter_mut() {
        for mut r in m.rows_mut() {
            for (j, x) in r.iter_mut().enumerate() {
                *x = T::from_f64((x.to_f64().unwrap() - mean[j]) * scale[j]).unwrap();
            }
        }
    }
}

/// Builds the interval embedding matrix from chunk sequences with the
/// chosen aggregation. The autoencoder is trained on the same sequences
/// after standardization.
pub fn embed_intervals<T: Scalar>(
    seqs: &[IntervalSequence<T>],
    mode: Aggregation,
    ae_cfg: &AutoencoderConfig,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let first = seqs.first().ok_or(EmbeddingError::Empty)?;
    let h = first.chunks.ncols();
    let vectors: Vec<Array1<T>> = match mode {
        Aggregation::Mean => seqs
            .iter()
            .map(|s| aggregate_mean(&s.chunks.rows().into_iter().map(|r| r.to_owned()).collect::<Vec<_>>()))
            .collect::<Result<_, _>>()?,
        Aggregation::Autoencoder => {
            let mut mats: Vec<Mat<T>> = seqs.iter().map(|s| s.chunks.clone()).collect();
            standardize(&mut mats);
            let (ae, _) = train_autoencoder(&mats, h, ae_cfg)?;
            mats.iter().map(|m| ae.encode(m)).collect::<Result<_, _>>()?
        }
    };
    Ok(EmbeddingMatrix {
        h,
        mode,
        rows: vectors.iter().map(|v| v.iter().map(|x| x.to_f32().unwrap()).collect()).collect(),
        index: seqs.iter().map(|s| (s.start, s.length)).collect(),
    })
}
