use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use aarr_core::checkpoint::{self, Checkpoint, RunLock};
use aarr_core::data::{generate_synthetic, read_dataset, write_dataset, GzslDataset};
use aarr_core::eval::{evaluate, GzslMetrics, ModelScorer};
use aarr_core::gradcheck;
use aarr_core::tensor::{Fault, Tensor};
use aarr_core::trainer::{self, ModelChoice};
use aarr_core::uad::{self, SimilaritySets};
use aarr_core::Error;

use crate::config::{env_threads, RunConfig};
use crate::{averaging, AttentionArgs, EvalArgs, Failure, GenerateArgs, GradcheckArgs, TrainArgs};

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|source| {
        Failure::Core(Error::Io {
            path: path.into(),
            source,
        })
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let spec = &mut cfg.data;
    set(&mut spec.seed, a.seed);
    set(&mut spec.k_seen, a.k_seen);
    set(&mut spec.k_unseen, a.k_unseen);
    set(&mut spec.n, a.attributes);
    set(&mut spec.d_v, a.embedding_dim);
    set(&mut spec.raw_dim, a.raw_dim);
    set(&mut spec.regions, a.regions);
    set(&mut spec.samples_per_class, a.samples_per_class);
    set(&mut spec.attribute_density, a.density);
    set(&mut spec.noise_sigma, a.noise_sigma);
    let out = a
        .out
        .or(cfg.paths.out_dir.clone())
        .ok_or_else(|| Failure::Usage("missing --out".into()))?;
    // meta.json carries the resolved spec, so the directory is a pure
    // function of it.
    let d = generate_synthetic(&cfg.data)?;
    write_dataset(&d, &out)?;
    println!(
        "wrote {} samples ({} seen, {} unseen classes) to {}",
        d.len(),
        d.seen_classes().len(),
        d.unseen_classes().len(),
        out.display()
    );
    Ok(())
}

fn metrics_json(m: &GzslMetrics) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
    s.push('\n');
    s
}

fn write_metrics(dir: &Path, m: &GzslMetrics) -> Result<(), Failure> {
    write_file(&dir.join("metrics.json"), &metrics_json(m))?;
    write_file(&dir.join("metrics.csv"), &m.to_csv())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let t = &mut cfg.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.warmup_epochs, a.warmup_epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.learning_rate, a.lr);
    set(&mut t.rmsprop_momentum, a.momentum);
    set(&mut t.weight_decay, a.weight_decay);
    set(&mut t.beta, a.beta);
    set(&mut t.gamma, a.gamma);
    set(&mut t.m, a.m);
    set(&mut t.delta, a.delta);
    set(&mut t.seed, a.seed);
    set(&mut t.channels, a.channels);
    set(&mut t.eval_model, a.model.map(Into::into));
    set(&mut t.averaging, averaging(a.per_sample));
    set(&mut t.threads, env_threads()?);
    if a.no_uad {
        t.uad_enabled = false;
    }
    if a.no_agl {
        t.agl_enabled = false;
    }
    if a.literal_eq8 {
        t.literal_eq8 = true;
    }
    if a.no_invariant_checks {
        t.check_invariants = false;
    }
    set(&mut cfg.paths.data_dir, a.data.map(Some));
    set(&mut cfg.paths.out_dir, a.out.map(Some));
    let data_dir = cfg.paths.data_dir.clone().ok_or_else(|| Failure::Usage("missing --data".into()))?;
    let out = cfg.paths.out_dir.clone().ok_or_else(|| Failure::Usage("missing --out".into()))?;
    cfg.train.check()?;

    let dataset = read_dataset(&data_dir)?;
    let _lock = RunLock::acquire(&out)?;
    write_file(&out.join("config.resolved.json"), &cfg.echo())?;
    let fit = trainer::fit(&dataset, &cfg.train, Some(&out))?;
    let last = fit.metrics.last().expect("at least one epoch");
    write_metrics(&out, last)?;
    let r = fit.history.last().expect("at least one epoch");
    println!(
        "epoch {} ({}): ce {:.4} uad {:.4} agl {:.4} | T {:.4} U {:.4} S {:.4} H {:.4}",
        r.epoch, r.phase, r.ce, r.uad, r.agl, r.t, r.u, r.s, r.h
    );
    Ok(())
}

fn resolve_checkpoint(path: &Path) -> Result<PathBuf, Failure> {
    if path.join(checkpoint::MANIFEST).is_file() {
        return Ok(path.to_path_buf());
    }
    checkpoint::latest_checkpoint(path)?.ok_or_else(|| {
        Failure::Core(Error::Io {
            path: path.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint found"),
        })
    })
}

fn pick_model(ckpt: &Checkpoint, choice: ModelChoice) -> Result<&aarr_core::arc::ArcModel, Failure> {
    match choice {
        ModelChoice::Student => Ok(&ckpt.student),
        ModelChoice::Teacher => ckpt.teacher.as_ref().ok_or_else(|| {
            Failure::Usage("checkpoint has no teacher: training ended inside the warm-up phase".into())
        }),
    }
}

fn check_compatible(ckpt: &Checkpoint, d: &GzslDataset) -> Result<(), Failure> {
    let m = &ckpt.student;
    if m.raw_dim() != d.raw_dim() || m.embedding_dim() != d.embedding_dim() {
        return Err(Failure::Core(Error::Dimension {
            op: "checkpoint vs dataset",
            lhs: vec![m.raw_dim(), m.embedding_dim()],
            rhs: vec![d.raw_dim(), d.embedding_dim()],
        }));
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let dir = resolve_checkpoint(&a.checkpoint)?;
    let ckpt = checkpoint::read_checkpoint(&dir)?;
    let dataset = read_dataset(&a.data)?;
    check_compatible(&ckpt, &dataset)?;
    let config = &ckpt.manifest.config;
    let model = pick_model(&ckpt, a.model.map_or(config.eval_model, Into::into))?;
    let avg = averaging(a.per_sample).unwrap_or(config.averaging);
    let threads = env_threads()?.unwrap_or(1);
    let metrics = evaluate(&ModelScorer::new(model, &dataset), &dataset, avg, threads)?;
    let out = a.out.unwrap_or_else(|| dir.clone());
    fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    write_metrics(&out, &metrics)?;
    println!("T {} U {} S {} H {}", metrics.t, metrics.u, metrics.s, metrics.h);
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let fault = a.inject_fault.then_some(Fault::SoftmaxBackward);
    let report = gradcheck::run(a.seed, a.seeds, fault)?;
    for t in &report.terms {
        println!(
            "{:<9} worst relative error {:.3e} ({} at seed {}) {}",
            t.term,
            t.worst_relative_error,
            t.parameter,
            t.seed,
            if t.worst_relative_error <= report.tolerance { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::GradientMismatch)
    }
}

fn header(regions: usize) -> String {
    (0..regions).map(|j| j.to_string()).collect::<Vec<_>>().join(",")
}

fn csv_row(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Attention `p` (one row per attribute) followed by the region weight, each
/// block under a header of region indices.
pub fn attention_csv(p: &Tensor, weight: &[f64]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", header(p.cols()));
    for i in 0..p.rows() {
        let _ = writeln!(out, "{}", csv_row(p.row(i)));
    }
    let _ = writeln!(out, "{}", header(weight.len()));
    let _ = writeln!(out, "{}", csv_row(weight));
    out
}

pub fn attention(a: AttentionArgs) -> Result<(), Failure> {
    let dir = resolve_checkpoint(&a.checkpoint)?;
    let ckpt = checkpoint::read_checkpoint(&dir)?;
    let dataset = read_dataset(&a.data)?;
    check_compatible(&ckpt, &dataset)?;
    let model = pick_model(&ckpt, a.model.into())?;
    // Before the warm-up ends the student stands in for the teacher.
    let teacher = ckpt.teacher.as_ref().unwrap_or(&ckpt.student);
    let log = &ckpt.manifest.similarity_sets;
    let mut sets = vec![Vec::new(); dataset.num_classes()];
    for (&k, s) in &log.sets {
        if let Some(slot) = sets.get_mut(k) {
            *slot = s.clone();
        }
    }
    let sets = SimilaritySets { m: log.m, sets };
    fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    for &i in &a.samples {
        if i >= dataset.len() {
            return Err(Failure::Usage(format!("sample {i} out of range (dataset has {})", dataset.len())));
        }
        let x = &dataset.descriptors[i];
        let p = model.scores(x, &dataset.embeddings)?;
        let map = uad::unseen_aware_map(teacher, x, &dataset.embeddings, &dataset.attributes, dataset.labels[i], &sets)?;
        let w = uad::attribute_reweight(&map, &p)?;
        write_file(&a.out.join(format!("attention_{i}.csv")), &attention_csv(&p, w.as_slice()))?;
    }
    println!("wrote {} attention grids to {}", a.samples.len(), a.out.display());
    Ok(())
}
