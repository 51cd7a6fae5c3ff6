//! Training orchestration: CE-only warm-up, then the combined objective with
//! distillation from an EMA teacher and the attribute-prototype loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agl::{self, AttributePool};
use crate::arc::{self, ArcModel, ArcVars};
use crate::checkpoint;
use crate::data::{GzslDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{self, Averaging, GzslMetrics, ModelScorer};
use crate::optim::{rmsprop_update, RmsPropConfig, RmsPropSlots, EPS, RHO};
use crate::par::parallel_map;
use crate::tensor::{Graph, Tensor, Var};
use crate::uad::{self, RegionWeight, SimilaritySets};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    #[default]
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_momentum: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub gamma: f64,
    pub m: usize,
    pub delta: f64,
    pub seed: u64,
    /// Feature channels `C` of the region head.
    pub channels: usize,
    pub uad_enabled: bool,
    pub agl_enabled: bool,
    /// Batch prototypes as a plain sum of region features.
    pub literal_eq8: bool,
    pub eval_model: ModelChoice,
    pub averaging: Averaging,
    pub threads: usize,
    /// Fail the run on the first broken runtime invariant.
    pub check_invariants: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            rmsprop_momentum: 0.9,
            weight_decay: 1e-4,
            beta: 10.0,
            gamma: 0.1,
            m: 5,
            delta: 0.9995,
            seed: 0,
            channels: 16,
            uad_enabled: true,
            agl_enabled: true,
            literal_eq8: false,
            eval_model: ModelChoice::Student,
            averaging: Averaging::PerClass,
            threads: 1,
            check_invariants: true,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return fail(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 || self.channels == 0 || self.threads == 0 || self.m == 0 {
            return fail("batch_size, channels, threads and m must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.rmsprop_momentum) {
            return fail(format!("rmsprop_momentum must lie in [0, 1), got {}", self.rmsprop_momentum));
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        Ok(())
    }

    pub fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.learning_rate,
            momentum: self.rmsprop_momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Optimizer constants that are fixed in code, echoed for provenance.
    pub fn fixed_constants() -> serde_json::Value {
        serde_json::json!({ "rmsprop_rho": RHO, "rmsprop_eps": EPS, "lambda_init": agl::LAMBDA_INIT })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// In [`arc::PARAM_NAMES`] order.
    pub student: Vec<RmsPropSlots>,
    pub w_p: RmsPropSlots,
    pub h: RmsPropSlots,
    pub theta: RmsPropSlots,
}

impl OptimizerState {
    pub fn zeros(model: &ArcModel, pool: &AttributePool) -> Self {
        OptimizerState {
            student: model.tensors().iter().map(|t| RmsPropSlots::zeros(t.shape())).collect(),
            w_p: RmsPropSlots::zeros(&[model.channels()]),
            h: RmsPropSlots::zeros(pool.h.shape()),
            theta: RmsPropSlots::zeros(&[1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub student: ArcModel,
    /// Absent until the warm-up phase ends.
    pub teacher: Option<ArcModel>,
    pub pool: AttributePool,
    /// Pool projection, length `C`.
    pub w_p: Tensor,
    pub optimizer: OptimizerState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub similarity: SimilaritySets,
}

impl ModelState {
    pub fn init(dataset: &GzslDataset, config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let student = ArcModel::init(&mut rng, dataset.raw_dim(), config.channels, dataset.embedding_dim());
        let std = 1.0 / (config.channels as f64).sqrt();
        let w_p = Tensor::vector(
            (0..config.channels)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let pool = AttributePool::new(dataset.num_attributes(), config.channels);
        let similarity = uad::build_similarity_sets(
            &dataset.attributes,
            &dataset.seen_classes(),
            &dataset.unseen_classes(),
            config.m,
        )?;
        Ok(ModelState {
            optimizer: OptimizerState::zeros(&student, &pool),
            student,
            teacher: None,
            pool,
            w_p,
            epoch: 0,
            similarity,
        })
    }

    pub fn in_warmup(&self) -> bool {
        self.teacher.is_none()
    }

    pub fn model(&self, choice: ModelChoice) -> Option<&ArcModel> {
        match choice {
            ModelChoice::Student => Some(&self.student),
            ModelChoice::Teacher => self.teacher.as_ref(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce: f64,
    pub uad: f64,
    pub agl: f64,
    pub total: f64,
    /// Samples for which the teacher was run to build activation maps.
    #[serde(skip)]
    pub teacher_passes: usize,
}

/// Counts runtime invariant checks and collects violations.
#[derive(Clone, Debug, Default)]
pub struct InvariantMonitor {
    pub enabled: bool,
    pub checks: usize,
    pub violations: Vec<String>,
}

const SOFTMAX_TOL: f64 = 1e-9;
const BOUND_TOL: f64 = 1e-12;

impl InvariantMonitor {
    pub fn new(enabled: bool) -> Self {
        InvariantMonitor {
            enabled,
            ..Default::default()
        }
    }

    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        self.checks += 1;
        if ok {
            return Ok(());
        }
        let msg = what();
        self.violations.push(msg.clone());
        Err(Error::Invariant(msg))
    }

    pub fn softmax_rows(&mut self, p: &Tensor) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let worst = (0..p.rows())
            .map(|i| (p.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        self.record(worst <= SOFTMAX_TOL, || format!("attention row sums deviate from 1 by {worst:e}"))
    }

    pub fn unit_range(&mut self, what: &str, values: &[f64]) -> Result<()> {
        let ok = values.iter().all(|v| (0.0..=1.0).contains(v));
        self.record(ok, || format!("{what} left [0, 1]"))
    }

    pub fn lambda(&mut self, lambda: f64) -> Result<()> {
        self.record(lambda > 0.0 && lambda < 1.0, || format!("pool mixing weight {lambda} left (0, 1)"))
    }

    pub fn interpolation(&mut self, h: &Tensor, h_bar: &Tensor, mixed: &Tensor) -> Result<()> {
        let ok = h
            .data()
            .iter()
            .zip(h_bar.data())
            .zip(mixed.data())
            .all(|((&a, &b), &m)| m >= a.min(b) - BOUND_TOL && m <= a.max(b) + BOUND_TOL);
        self.record(ok, || "updated pool left the box spanned by old pool and batch prototypes".into())
    }

    pub fn teacher_frozen(&mut self, before: &ArcModel, after: &ArcModel) -> Result<()> {
        self.record(before == after, || "teacher parameters changed within an epoch".into())
    }

    pub fn losses(&mut self, l: &StepLosses, beta: f64, gamma: f64) -> Result<()> {
        let nonneg = l.ce >= 0.0 && l.uad >= 0.0 && l.agl >= 0.0;
        let sum = l.ce + beta * l.uad + gamma * l.agl;
        self.record(nonneg && sum == l.total, || {
            format!("loss components inconsistent: {l:?} with beta {beta}, gamma {gamma}")
        })
    }
}

fn finite(term: &'static str, value: f64, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, epoch, batch })
    }
}

/// Teacher-side inputs for distillation of one sample.
struct TeacherView {
    features: Tensor,
    map: Tensor,
}

fn teacher_view(
    teacher: &ArcModel,
    x: &Tensor,
    dataset: &GzslDataset,
    class: usize,
    sets: &SimilaritySets,
) -> Result<TeacherView> {
    let features = teacher.features(x)?;
    let mut classes = vec![class];
    classes.extend_from_slice(sets.get(class));
    let maps: Vec<Tensor> =
        uad::feature_gradients(teacher, &features, &dataset.embeddings, &dataset.attributes, &classes)?
            .iter()
            .map(uad::min_max_normalize)
            .collect();
    let map = uad::combine_maps(&maps[0], &maps[1..])?;
    Ok(TeacherView { features, map })
}

/// One optimizer step on `batch` (indices into `dataset`).
pub fn train_step(
    state: &mut ModelState,
    batch: &[usize],
    batch_index: usize,
    dataset: &GzslDataset,
    config: &TrainConfig,
    monitor: &mut InvariantMonitor,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let main = !state.in_warmup();
    let use_uad = main && config.uad_enabled;
    let use_agl = main && config.agl_enabled;
    if use_agl && !state.pool.initialized {
        return Err(Error::contract("attribute pool must be initialized before the main phase"));
    }
    let epoch = state.epoch;

    let views = if use_uad {
        let teacher = state.teacher.as_ref().expect("main phase has a teacher");
        parallel_map(batch, config.threads, |&i| {
            teacher_view(teacher, &dataset.descriptors[i], dataset, dataset.labels[i], &state.similarity)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut g = Graph::new();
    let vars = ArcVars::bind(&mut g, &state.student, true);
    let v = g.constant(dataset.embeddings.clone());
    let a = g.constant(dataset.attributes.clone());
    let mut ce_terms = Vec::with_capacity(batch.len());
    let mut uad_terms = Vec::new();
    let mut features = Vec::new();
    let mut scores = Vec::new();
    for (b, &i) in batch.iter().enumerate() {
        let x = g.constant(dataset.descriptors[i].clone());
        let out = arc::forward(&mut g, &vars, x, v, a)?;
        monitor.softmax_rows(g.value(out.scores))?;
        ce_terms.push(arc::ce_loss(&mut g, out.logits, dataset.labels[i])?);
        if use_uad {
            let view = &views[b];
            monitor.unit_range("activation map", view.map.data())?;
            let weight: RegionWeight = uad::attribute_reweight(&view.map, g.value(out.scores))?;
            monitor.unit_range("region weight", weight.as_slice())?;
            uad_terms.push(uad::uad_loss(&mut g, out.features, &view.features, &weight)?);
        }
        features.push(out.features);
        scores.push(out.scores);
    }
    let inv_b = 1.0 / batch.len() as f64;
    let ce_sum = g.add_n(&ce_terms)?;
    let ce = g.scale(ce_sum, inv_b);
    let mut total = ce;
    let mut uad_node = None;
    if use_uad {
        let s = g.add_n(&uad_terms)?;
        let l = g.scale(s, inv_b);
        let weighted = g.scale(l, config.beta);
        total = g.add(total, weighted)?;
        uad_node = Some(l);
    }
    let mut agl_vars: Option<(Var, Var, Var, Var, Var)> = None;
    let mut agl_node = None;
    if use_agl {
        let h_bar = agl::batch_prototypes(&mut g, &features, &scores, config.literal_eq8)?;
        let h = g.param(state.pool.h.clone());
        let theta = g.param(Tensor::scalar(state.pool.theta));
        let w_p = g.param(state.w_p.clone());
        let mixed = agl::update_pool(&mut g, h, theta, h_bar)?;
        monitor.lambda(state.pool.lambda())?;
        monitor.interpolation(g.value(h), g.value(h_bar), g.value(mixed))?;
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            terms.push(agl::agl_loss(&mut g, mixed, a, w_p, dataset.labels[i])?);
        }
        let s = g.add_n(&terms)?;
        let l = g.scale(s, inv_b);
        let weighted = g.scale(l, config.gamma);
        total = g.add(total, weighted)?;
        agl_node = Some(l);
        agl_vars = Some((h, theta, w_p, mixed, h_bar));
    }

    let losses = StepLosses {
        ce: finite("ce", g.value(ce).item(), epoch, batch_index)?,
        uad: match uad_node {
            Some(l) => finite("uad", g.value(l).item(), epoch, batch_index)?,
            None => 0.0,
        },
        agl: match agl_node {
            Some(l) => finite("agl", g.value(l).item(), epoch, batch_index)?,
            None => 0.0,
        },
        total: finite("total", g.value(total).item(), epoch, batch_index)?,
        teacher_passes: views.len(),
    };
    monitor.losses(&losses, if use_uad { config.beta } else { 0.0 }, if use_agl { config.gamma } else { 0.0 })?;

    let mut targets: Vec<Var> = vars.all().to_vec();
    if let Some((h, theta, w_p, _, _)) = agl_vars {
        targets.extend([h, theta, w_p]);
    }
    let grads = g.backward(total, &targets)?;
    let opt = config.rmsprop();
    for ((param, grad), slots) in state
        .student
        .tensors_mut()
        .into_iter()
        .zip(&grads)
        .zip(&mut state.optimizer.student)
    {
        rmsprop_update(param, grad, slots, opt)?;
    }
    if let Some((_, _, _, mixed, _)) = agl_vars {
        // The moving-average result becomes the stored pool before its own
        // gradient step.
        state.pool.h = g.value(mixed).clone();
        rmsprop_update(&mut state.pool.h, &grads[4], &mut state.optimizer.h, opt)?;
        let mut theta = Tensor::scalar(state.pool.theta);
        rmsprop_update(&mut theta, &grads[5], &mut state.optimizer.theta, opt)?;
        state.pool.theta = theta.item();
        rmsprop_update(&mut state.w_p, &grads[6], &mut state.optimizer.w_p, opt)?;
        monitor.lambda(state.pool.lambda())?;
    }
    Ok(losses)
}

/// `teacher <- delta * teacher + (1 - delta) * student`, tensor by tensor.
pub fn ema_update(teacher: &mut ArcModel, student: &ArcModel, delta: f64) -> Result<()> {
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        t.same_shape("ema_teacher", s)?;
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = delta * *tv + (1.0 - delta) * sv;
        }
    }
    Ok(())
}

pub fn ema_teacher(state: &mut ModelState, delta: f64) -> Result<()> {
    let teacher = state
        .teacher
        .as_mut()
        .ok_or_else(|| Error::contract("no teacher before the warm-up phase ends"))?;
    ema_update(teacher, &state.student, delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: String,
    pub ce: f64,
    pub uad: f64,
    pub agl: f64,
    pub total: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub lambda: f64,
}

pub const HISTORY_HEADER: &str = "epoch,phase,ce,uad,agl,total,T,U,S,H,lambda";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch, self.phase, self.ce, self.uad, self.agl, self.total, self.t, self.u, self.s, self.h, self.lambda
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub struct FitOutput {
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
    pub metrics: Vec<GzslMetrics>,
    pub invariant_checks: usize,
}

/// Sample order for one epoch, drawn from its own RNG stream.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    order
}

pub fn evaluate_state(
    state: &ModelState,
    dataset: &GzslDataset,
    choice: ModelChoice,
    averaging: Averaging,
    threads: usize,
) -> Result<GzslMetrics> {
    // The teacher does not exist during warm-up; the student stands in.
    let model = state.model(choice).unwrap_or(&state.student);
    eval::evaluate(&ModelScorer::new(model, dataset), dataset, averaging, threads)
}

/// Runs the full schedule. With `out_dir`, writes `history.csv` and one
/// checkpoint directory per epoch under `out_dir/checkpoints`.
pub fn fit(dataset: &GzslDataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<FitOutput> {
    config.check()?;
    let violations = dataset.validate();
    if let Some(v) = violations.first() {
        return Err(Error::contract(format!("invalid dataset: {v}")));
    }
    let mut state = ModelState::init(dataset, config)?;
    let train = dataset.indices(Split::Train);
    let mut monitor = InvariantMonitor::new(config.check_invariants);
    let mut history = Vec::with_capacity(config.epochs);
    let mut all_metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if epoch == config.warmup_epochs {
            let teacher = state.student.clone();
            if config.agl_enabled {
                state.pool.init_from_teacher(
                    &teacher,
                    train.iter().map(|&i| &dataset.descriptors[i]),
                    &dataset.embeddings,
                )?;
            }
            state.teacher = Some(teacher);
        }
        let snapshot = state.teacher.clone();
        let order = epoch_order(&train, config.seed, epoch);
        let mut sums = [0.0; 4];
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let l = train_step(&mut state, batch, b, dataset, config, &mut monitor)?;
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([l.ce, l.uad, l.agl, l.total]) {
                *s += w * v;
            }
        }
        if let (Some(before), Some(after)) = (&snapshot, &state.teacher) {
            monitor.teacher_frozen(before, after)?;
        }
        let phase = if state.in_warmup() { "warmup" } else { "main" };
        if !state.in_warmup() {
            ema_teacher(&mut state, config.delta)?;
        }
        state.epoch = epoch + 1;

        let metrics = evaluate_state(&state, dataset, config.eval_model, config.averaging, config.threads)?;
        let n = train.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            phase: phase.into(),
            ce: sums[0] / n,
            uad: sums[1] / n,
            agl: sums[2] / n,
            total: sums[3] / n,
            t: metrics.t,
            u: metrics.u,
            s: metrics.s,
            h: metrics.h,
            lambda: state.pool.lambda(),
        };
        history.push(record);
        if let Some(dir) = out_dir {
            checkpoint::write_checkpoint(
                &checkpoint::epoch_dir(dir, epoch + 1),
                &state,
                config,
                &history,
                &metrics,
            )?;
            checkpoint::write_atomic(&dir.join("history.csv"), history_csv(&history).as_bytes())?;
        }
        all_metrics.push(metrics);
    }
    Ok(FitOutput {
        state,
        history,
        metrics: all_metrics,
        invariant_checks: monitor.checks,
    })
}
