//! Offline trajectories, sub-trajectory sampling, and the binary store.
//!
//! Only the two endpoints of each sampled sub-trajectory are persisted, so a
//! record's size depends on the weight dim and the conditioning block but
//! never on the trajectory length. Writers are exclusive per file; loaded
//! stores are immutable.

use std::fs::File;
use std::io::{BufWriter, Read, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::ParameterVector;
use crate::optim::PolicyKind;
use crate::rng::Rng;
use crate::tasks::Episode;

pub const STORE_MAGIC: &[u8; 4] = b"LOHP";
pub const STORE_VERSION: u16 = 1;
pub const EPISODE_MAGIC: &[u8; 8] = b"LOHP-EPI";

const FLAG_SAM: u8 = 0b0000_0001;
const FLAG_ADAM: u8 = 0b0000_0010;
const FLAG_FULL_SPAN: u8 = 0b0000_0100;

/// Which real optimizer produced a trajectory, and whether the gradient was
/// sharpness-aware.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyLabel {
    pub kind: PolicyKind,
    pub sam: bool,
}

impl PolicyLabel {
    fn to_flags(self) -> u8 {
        let mut f = 0;
        if self.sam {
            f |= FLAG_SAM;
        }
        if self.kind == PolicyKind::Adam {
            f |= FLAG_ADAM;
        }
        f
    }

    pub fn from_flags(flags: u8) -> Self {
        PolicyLabel {
            kind: if flags & FLAG_ADAM != 0 {
                PolicyKind::Adam
            } else {
                PolicyKind::Sgd
            },
            sam: flags & FLAG_SAM != 0,
        }
    }
}

/// Checkpoints θ_0..θ_T recorded by a real optimizer on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineTrajectory {
    pub task_id: u64,
    pub label: PolicyLabel,
    pub states: Vec<ParameterVector>,
    /// Eval loss per checkpoint (length T+1).
    pub eval_losses: Vec<f64>,
    /// Unlabeled conditioning samples of the task; may be empty (0×0).
    pub conditioning: Matrix,
}

impl OfflineTrajectory {
    /// Number of optimizer steps T; states holds T+1 entries.
    pub fn t_len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn initial(&self) -> &ParameterVector {
        &self.states[0]
    }

    pub fn last(&self) -> &ParameterVector {
        self.states.last().unwrap()
    }

    /// Drops at most k−1 tail checkpoints so that T becomes a multiple of k.
    pub fn truncate_to_multiple_of(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let t = self.t_len();
        if t < k {
            return Err(Error::InvalidArgument(format!(
                "trajectory shorter than one segment (T={t}, k={k})"
            )));
        }
        let keep = (t / k) * k;
        self.states.truncate(keep + 1);
        self.eval_losses.truncate(keep + 1);
        Ok(())
    }
}

/// One training record: the endpoints of an offline sub-trajectory plus the
/// task's conditioning samples. Storage is independent of T.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTrajectorySample {
    pub task_id: u64,
    pub theta_m: ParameterVector,
    pub theta_n: ParameterVector,
    pub m: u32,
    pub n: u32,
    pub t_total: u32,
    pub flags: u8,
    pub conditioning: Matrix,
}

impl SubTrajectorySample {
    pub fn label(&self) -> PolicyLabel {
        PolicyLabel::from_flags(self.flags)
    }

    pub fn is_full_span(&self) -> bool {
        self.flags & FLAG_FULL_SPAN != 0
    }

    pub fn dim(&self) -> usize {
        self.theta_m.dim()
    }
}

/// Draws endpoint pairs with both indices aligned to k (so the matched online
/// indices m/k and n/k are integers), uniformly over admissible pairs.
///
/// With probability `full_span_prob` a draw is forced to the full span
/// (0, T), which exercises the full-trajectory form of the balance loss.
pub fn sample_subtrajectories(
    traj: &OfflineTrajectory,
    count: usize,
    k: usize,
    full_span_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<SubTrajectorySample>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let t = traj.t_len();
    if t < k {
        return Err(Error::InvalidArgument(format!(
            "trajectory shorter than one segment (T={t}, k={k})"
        )));
    }
    if t % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "T={t} is not a multiple of k={k}; truncate the trajectory first"
        )));
    }
    if !(0.0..=1.0).contains(&full_span_prob) {
        return Err(Error::InvalidArgument(format!(
            "full_span_prob {full_span_prob} outside [0, 1]"
        )));
    }
    let segments = t / k; // aligned indices are 0, k, 2k, ..., t
    let base_flags = traj.label.to_flags();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (i, j) = if full_span_prob > 0.0 && rng.chance(full_span_prob) {
            (0, segments)
        } else {
            // Uniform over pairs 0 <= i < j <= segments.
            let n_pairs = segments * (segments + 1) / 2;
            let mut idx = rng.index(n_pairs);
            let mut i = 0usize;
            let mut row = segments; // pairs with this i
            while idx >= row {
                idx -= row;
                i += 1;
                row -= 1;
            }
            (i, i + 1 + idx)
        };
        let (m, n) = (i * k, j * k);
        let full = m == 0 && n == t;
        out.push(SubTrajectorySample {
            task_id: traj.task_id,
            theta_m: traj.states[m].clone(),
            theta_n: traj.states[n].clone(),
            m: m as u32,
            n: n as u32,
            t_total: t as u32,
            flags: base_flags | if full { FLAG_FULL_SPAN } else { 0 },
            conditioning: traj.conditioning.clone(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Binary store format
//
// magic "LOHP" | version u16 | record count u64 | records...
// record: task_id u64 | m u32 | n u32 | T u32 | dim u32 | flags u8
//         | theta_m dim×f64 | theta_n dim×f64
//         | cond_rows u32 | cond_cols u32 | cond data f64...
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

struct ByteWriter<W: std::io::Write> {
    w: W,
    written: u64,
}

impl<W: std::io::Write> ByteWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.w.write_all(bytes)?;
        self.written += bytes.len() as u64;
        Ok(())
    }

    fn put_u16(&mut self, v: u16) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    fn put_u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    fn put_u64(&mut self, v: u64) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    fn put_f64s(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.put(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn put_u8(&mut self, v: u8) -> Result<()> {
        self.put(&[v])
    }
}

struct ByteReader {
    buf: Vec<u8>,
    pos: usize,
}

impl ByteReader {
    fn open(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        Ok(Self { buf, pos: 0 })
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "truncated: need {n} bytes for {what}, have {}",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(8 * n, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_matrix<W: std::io::Write>(w: &mut ByteWriter<W>, m: &Matrix) -> Result<()> {
    w.put_u32(m.rows() as u32)?;
    w.put_u32(m.cols() as u32)?;
    w.put_f64s(m.data())
}

fn read_matrix(r: &mut ByteReader, what: &str) -> Result<Matrix> {
    let rows = r.u32(what)? as usize;
    let cols = r.u32(what)? as usize;
    let data = r.f64s(rows * cols, what)?;
    Matrix::from_flat(rows, cols, data)
}

/// Writes samples to `path`; returns the record count.
pub fn write_store(path: &Path, samples: &[SubTrajectorySample]) -> Result<usize> {
    let file = File::create(path)?;
    let mut w = ByteWriter {
        w: BufWriter::new(file),
        written: 0,
    };
    w.put(STORE_MAGIC)?;
    w.put_u16(STORE_VERSION)?;
    w.put_u64(samples.len() as u64)?;
    for s in samples {
        if s.theta_m.dim() != s.theta_n.dim() {
            return Err(Error::DimMismatch {
                context: "sample endpoint dims",
                expected: s.theta_m.dim(),
                actual: s.theta_n.dim(),
            });
        }
        w.put_u64(s.task_id)?;
        w.put_u32(s.m)?;
        w.put_u32(s.n)?;
        w.put_u32(s.t_total)?;
        w.put_u32(s.theta_m.dim() as u32)?;
        w.put_u8(s.flags)?;
        w.put_f64s(s.theta_m.values())?;
        w.put_f64s(s.theta_n.values())?;
        write_matrix(&mut w, &s.conditioning)?;
    }
    w.w.flush()?;
    Ok(samples.len())
}

/// Reads a store written by [`write_store`]; bit-exact round trip.
pub fn read_store(path: &Path) -> Result<Vec<SubTrajectorySample>> {
    let mut r = ByteReader::open(path)?;
    let magic = r.take(4, "magic")?;
    if magic != STORE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {STORE_MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != STORE_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u64("record count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let task_id = r.u64("task_id")?;
        let m = r.u32("m")?;
        let n = r.u32("n")?;
        let t_total = r.u32("T")?;
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(r.fail("record dim is 0"));
        }
        let flags = r.u8("flags")?;
        if !(m < n && n <= t_total) {
            return Err(r.fail(format!("bad indices m={m} n={n} T={t_total}")));
        }
        let theta_m = ParameterVector::new(r.f64s(dim, "theta_m")?)
            .map_err(|e| r.fail(e.to_string()))?;
        let theta_n = ParameterVector::new(r.f64s(dim, "theta_n")?)
            .map_err(|e| r.fail(e.to_string()))?;
        let conditioning = read_matrix(&mut r, "conditioning")?;
        out.push(SubTrajectorySample {
            task_id,
            theta_m,
            theta_n,
            m,
            n,
            t_total,
            flags,
            conditioning,
        });
    }
    if !r.done() {
        return Err(r.fail("trailing bytes after last record"));
    }
    Ok(out)
}

/// Episode export sharing the store's encoding conventions.
pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<usize> {
    let file = File::create(path)?;
    let mut w = ByteWriter {
        w: BufWriter::new(file),
        written: 0,
    };
    w.put(EPISODE_MAGIC)?;
    w.put_u16(STORE_VERSION)?;
    w.put_u64(episodes.len() as u64)?;
    for ep in episodes {
        w.put_u64(ep.task_id)?;
        w.put_u32(ep.n_classes as u32)?;
        write_matrix(&mut w, &ep.unlabeled_x)?;
        write_matrix(&mut w, &ep.train_x)?;
        w.put_u32(ep.train_y.len() as u32)?;
        for &y in &ep.train_y {
            w.put_u32(y as u32)?;
        }
        write_matrix(&mut w, &ep.eval_x)?;
        w.put_u32(ep.eval_y.len() as u32)?;
        for &y in &ep.eval_y {
            w.put_u32(y as u32)?;
        }
        write_matrix(&mut w, &ep.class_means)?;
    }
    w.w.flush()?;
    Ok(episodes.len())
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let mut r = ByteReader::open(path)?;
    let magic = r.take(8, "magic")?;
    if magic != EPISODE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {EPISODE_MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != STORE_VERSION {
        return Err(Error::Parse {
            offset: 8,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u64("episode count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let task_id = r.u64("task_id")?;
        let n_classes = r.u32("n_classes")? as usize;
        let unlabeled_x = read_matrix(&mut r, "unlabeled_x")?;
        let train_x = read_matrix(&mut r, "train_x")?;
        let n_train = r.u32("train label count")? as usize;
        let mut train_y = Vec::with_capacity(n_train);
        for _ in 0..n_train {
            train_y.push(r.u32("train label")? as usize);
        }
        let eval_x = read_matrix(&mut r, "eval_x")?;
        let n_eval = r.u32("eval label count")? as usize;
        let mut eval_y = Vec::with_capacity(n_eval);
        for _ in 0..n_eval {
            eval_y.push(r.u32("eval label")? as usize);
        }
        let class_means = read_matrix(&mut r, "class_means")?;
        if train_y.iter().chain(&eval_y).any(|&y| y >= n_classes) {
            return Err(r.fail("label out of class range"));
        }
        out.push(Episode {
            unlabeled_x,
            train_x,
            train_y,
            eval_x,
            eval_y,
            n_classes,
            task_id,
            class_means,
        });
    }
    if !r.done() {
        return Err(r.fail("trailing bytes after last episode"));
    }
    Ok(out)
}
