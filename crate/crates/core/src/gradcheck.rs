//! Central finite-difference checks of every training loss against the
//! analytic reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agl;
use crate::arc::{self, ArcModel, ArcVars, PARAM_NAMES};
use crate::data::normalize_rows;
use crate::error::Result;
use crate::tensor::{Fault, Graph, Tensor, Var};
use crate::uad::{self, RegionWeight};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Norm floor in the relative error, so tensors with a vanishing gradient do
/// not divide by zero.
const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub raw_dim: usize,
    pub channels: usize,
    pub regions: usize,
    pub attributes: usize,
    pub d_v: usize,
    pub classes: usize,
    pub batch: usize,
}

pub const DIMS: Dims = Dims {
    raw_dim: 9,
    channels: 8,
    regions: 6,
    attributes: 10,
    d_v: 12,
    classes: 7,
    batch: 3,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Ce,
    Uad,
    Agl,
    Combined,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Ce, Term::Uad, Term::Agl, Term::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Term::Ce => "ce",
            Term::Uad => "uad",
            Term::Agl => "agl",
            Term::Combined => "combined",
        }
    }

    fn touches_pool(self) -> bool {
        matches!(self, Term::Agl | Term::Combined)
    }
}

const BETA: f64 = 10.0;
const GAMMA: f64 = 0.1;

/// A random instance. Teacher features and region weights are fixed inputs,
/// computed once at the base point.
struct Problem {
    /// Student tensors, then `h`, `theta`, `w_p`.
    params: Vec<Tensor>,
    xs: Vec<Tensor>,
    ys: Vec<usize>,
    v: Tensor,
    a: Tensor,
    f_t: Vec<Tensor>,
    weights: Vec<RegionWeight>,
}

const POOL_NAMES: [&str; 3] = ["pool_h", "theta_lambda", "w_p"];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

fn problem(seed: u64, d: Dims) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = ArcModel::init(&mut rng, d.raw_dim, d.channels, d.d_v);
    let mut teacher = student.clone();
    for t in teacher.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    let mut params: Vec<Tensor> = student.tensors().into_iter().cloned().collect();
    params[1] = uniform(&mut rng, &[d.channels], -0.5, 0.5);
    params.push(uniform(&mut rng, &[d.attributes, d.channels], 0.0, 1.5));
    params.push(Tensor::scalar(rng.gen_range(-1.0..2.5)));
    params.push(uniform(&mut rng, &[d.channels], -1.0, 1.0));

    let v = uniform(&mut rng, &[d.attributes, d.d_v], -1.0, 1.0);
    let a = normalize_rows(&uniform(&mut rng, &[d.classes, d.attributes], 0.0, 1.0));
    let xs: Vec<Tensor> = (0..d.batch)
        .map(|_| uniform(&mut rng, &[d.raw_dim, d.regions], -1.0, 1.0))
        .collect();
    let ys: Vec<usize> = (0..d.batch).map(|_| rng.gen_range(0..d.classes)).collect();

    let base = ArcModel::from_tensors([
        params[0].clone(),
        params[1].clone(),
        params[2].clone(),
        params[3].clone(),
    ]);
    let mut f_t = Vec::new();
    let mut weights = Vec::new();
    for (x, &y) in xs.iter().zip(&ys) {
        let maps = uad::class_activation_maps(&teacher, x, &v, &a, &[y, (y + 1) % d.classes])?;
        let merged = uad::combine_maps(&maps[0], &maps[1..])?;
        weights.push(uad::attribute_reweight(&merged, &base.scores(x, &v)?)?);
        f_t.push(teacher.features(x)?);
    }
    Ok(Problem {
        params,
        xs,
        ys,
        v,
        a,
        f_t,
        weights,
    })
}

fn build(term: Term, p: &Problem, params: &[Tensor], fault: Option<Fault>) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let leaves: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let vars = ArcVars {
        head_weight: leaves[0],
        head_bias: leaves[1],
        w1: leaves[2],
        w2: leaves[3],
    };
    let v = g.constant(p.v.clone());
    let a = g.constant(p.a.clone());
    let inv_b = 1.0 / p.xs.len() as f64;

    let mut ce = Vec::new();
    let mut uad_terms = Vec::new();
    let mut feats = Vec::new();
    let mut scores = Vec::new();
    for (b, x) in p.xs.iter().enumerate() {
        let x = g.constant(x.clone());
        let out = arc::forward(&mut g, &vars, x, v, a)?;
        ce.push(arc::ce_loss(&mut g, out.logits, p.ys[b])?);
        uad_terms.push(uad::uad_loss(&mut g, out.features, &p.f_t[b], &p.weights[b])?);
        feats.push(out.features);
        scores.push(out.scores);
    }
    let mean = |g: &mut Graph, xs: &[Var]| -> Result<Var> {
        let s = g.add_n(xs)?;
        Ok(g.scale(s, inv_b))
    };
    let ce = mean(&mut g, &ce)?;
    let uad_l = mean(&mut g, &uad_terms)?;
    let agl_l = if term.touches_pool() {
        let h_bar = agl::batch_prototypes(&mut g, &feats, &scores, false)?;
        let mixed = agl::update_pool(&mut g, leaves[4], leaves[5], h_bar)?;
        let mut terms = Vec::new();
        for &y in &p.ys {
            terms.push(agl::agl_loss(&mut g, mixed, a, leaves[6], y)?);
        }
        Some(mean(&mut g, &terms)?)
    } else {
        None
    };
    let loss = match term {
        Term::Ce => ce,
        Term::Uad => uad_l,
        Term::Agl => agl_l.expect("pool term"),
        Term::Combined => {
            let u = g.scale(uad_l, BETA);
            let q = g.scale(agl_l.expect("pool term"), GAMMA);
            let s = g.add(ce, u)?;
            g.add(s, q)?
        }
    };
    let targets = if term.touches_pool() { leaves } else { leaves[..4].to_vec() };
    Ok((g, loss, targets))
}

fn loss_at(term: Term, p: &Problem, params: &[Tensor]) -> Result<f64> {
    let (g, loss, _) = build(term, p, params, None)?;
    Ok(g.value(loss).item())
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(NORM_FLOOR)
}

/// Worst relative error over the parameters of one term, with the name of
/// the parameter where it occurred.
fn check_term(term: Term, p: &Problem, fault: Option<Fault>) -> Result<(f64, &'static str)> {
    let (g, loss, targets) = build(term, p, &p.params, fault)?;
    let analytic = g.backward(loss, &targets)?;
    let names: Vec<&'static str> = PARAM_NAMES.iter().chain(POOL_NAMES.iter()).copied().collect();
    let mut worst = (0.0, names[0]);
    let mut params = p.params.clone();
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = Tensor::zeros(grad.shape());
        for k in 0..grad.numel() {
            let orig = params[i].data()[k];
            params[i].data_mut()[k] = orig + STEP;
            let up = loss_at(term, p, &params)?;
            params[i].data_mut()[k] = orig - STEP;
            let down = loss_at(term, p, &params)?;
            params[i].data_mut()[k] = orig;
            numeric.data_mut()[k] = (up - down) / (2.0 * STEP);
        }
        let err = relative_error(grad, &numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, names[i]);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct TermReport {
    pub term: &'static str,
    pub worst_relative_error: f64,
    pub parameter: &'static str,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.worst_relative_error <= self.tolerance)
    }
}

/// Checks every loss term on `seeds` consecutive seeds starting at `first_seed`.
pub fn run(first_seed: u64, seeds: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut terms: Vec<TermReport> = Term::ALL
        .iter()
        .map(|t| TermReport {
            term: t.name(),
            worst_relative_error: 0.0,
            parameter: PARAM_NAMES[0],
            seed: first_seed,
        })
        .collect();
    let seed_list: Vec<u64> = (first_seed..first_seed + seeds).collect();
    for &seed in &seed_list {
        let p = problem(seed, DIMS)?;
        for (report, &term) in terms.iter_mut().zip(Term::ALL.iter()) {
            let (err, parameter) = check_term(term, &p, fault)?;
            if err > report.worst_relative_error || err.is_nan() {
                *report = TermReport {
                    term: term.name(),
                    worst_relative_error: err,
                    parameter,
                    seed,
                };
            }
        }
    }
    Ok(GradcheckReport {
        seeds: seed_list,
        tolerance: TOLERANCE,
        terms,
    })
}
