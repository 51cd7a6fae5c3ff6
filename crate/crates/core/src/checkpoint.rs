//! Per-epoch checkpoint directories and run-directory locking.
//!
//! Layout of `checkpoints/epoch_NNNN/`:
//!
//! ```text
//! student_{head_weight,head_bias,w1,w2}.aarr
//! teacher_{...}.aarr      (only once the teacher exists)
//! pool.aarr w_p.aarr
//! manifest.json          (includes the pool mixing logit)
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agl::AttributePool;
use crate::arc::{ArcModel, PARAM_NAMES};
use crate::data::format::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::eval::GzslMetrics;
use crate::tensor::Tensor;
use crate::trainer::{EpochRecord, ModelState, TrainConfig};

pub const MANIFEST: &str = "manifest.json";

pub fn epoch_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSummary {
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityLog {
    pub m: usize,
    /// Seen class -> unseen classes whose neighbourhoods include it.
    pub sets: BTreeMap<usize, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub epoch: usize,
    pub config: TrainConfig,
    pub constants: serde_json::Value,
    pub loss_trace: Vec<EpochRecord>,
    pub metrics: MetricSummary,
    pub theta_lambda: f64,
    pub lambda: f64,
    pub pool_initialized: bool,
    pub has_teacher: bool,
    pub similarity_sets: SimilarityLog,
}

fn param_path(dir: &Path, role: &str, name: &str) -> PathBuf {
    dir.join(format!("{role}_{name}.aarr"))
}

fn write_model(dir: &Path, role: &str, model: &ArcModel) -> Result<()> {
    for (name, t) in PARAM_NAMES.iter().zip(model.tensors()) {
        write_tensor(&param_path(dir, role, name), t)?;
    }
    Ok(())
}

fn read_model(dir: &Path, role: &str) -> Result<ArcModel> {
    let mut ts = Vec::with_capacity(4);
    for name in PARAM_NAMES {
        ts.push(read_tensor(&param_path(dir, role, name))?);
    }
    let [w, b, w1, w2]: [Tensor; 4] = ts.try_into().expect("four parameters");
    let c = w.rows();
    let consistent = w.shape().len() == 2
        && b.shape() == [c]
        && w1.shape().len() == 2
        && w1.cols() == c
        && w2.shape() == w1.shape();
    if !consistent {
        return Err(Error::format(0, format!("{role} parameter shapes are inconsistent")));
    }
    Ok(ArcModel::from_tensors([w, b, w1, w2]))
}

pub fn write_checkpoint(
    dir: &Path,
    state: &ModelState,
    config: &TrainConfig,
    history: &[EpochRecord],
    metrics: &GzslMetrics,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_model(dir, "student", &state.student)?;
    if let Some(t) = &state.teacher {
        write_model(dir, "teacher", t)?;
    }
    write_tensor(&dir.join("pool.aarr"), &state.pool.h)?;
    write_tensor(&dir.join("w_p.aarr"), &state.w_p)?;
    let sets = state
        .similarity
        .sets
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(k, s)| (k, s.clone()))
        .collect();
    let manifest = Manifest {
        epoch: state.epoch,
        config: config.clone(),
        constants: TrainConfig::fixed_constants(),
        loss_trace: history.to_vec(),
        metrics: MetricSummary {
            t: metrics.t,
            u: metrics.u,
            s: metrics.s,
            h: metrics.h,
        },
        theta_lambda: state.pool.theta,
        lambda: state.pool.lambda(),
        pool_initialized: state.pool.initialized,
        has_teacher: state.teacher.is_some(),
        similarity_sets: SimilarityLog {
            m: state.similarity.m,
            sets,
        },
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_atomic(&dir.join(MANIFEST), json.as_bytes())
}

/// Everything needed to score or inspect a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub student: ArcModel,
    pub teacher: Option<ArcModel>,
    pub pool: AttributePool,
    pub w_p: Tensor,
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
    let student = read_model(dir, "student")?;
    let teacher = if manifest.has_teacher {
        let t = read_model(dir, "teacher")?;
        if t.tensors().iter().zip(student.tensors()).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::format(0, "teacher and student shapes differ"));
        }
        Some(t)
    } else {
        None
    };
    let pool = AttributePool {
        h: read_tensor(&dir.join("pool.aarr"))?,
        theta: manifest.theta_lambda,
        initialized: manifest.pool_initialized,
    };
    Ok(Checkpoint {
        student,
        teacher,
        pool,
        w_p: read_tensor(&dir.join("w_p.aarr"))?,
        manifest,
    })
}

/// The most recent `epoch_NNNN` directory under `run_dir/checkpoints`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let root = run_dir.join("checkpoints");
    if !root.is_dir() {
        return Ok(None);
    }
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let p = entry.map_err(|e| Error::io(&root, e))?.path();
        let is_epoch = p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("epoch_"));
        if is_epoch && best.as_ref().is_none_or(|b| p > *b) {
            best = Some(p);
        }
    }
    Ok(best)
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(".lock");
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(RunLock { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
