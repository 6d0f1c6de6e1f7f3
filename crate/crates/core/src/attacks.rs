//! ℓ∞ projected-gradient adversaries.
//!
//! One PGD engine serves every objective: classification (`CeMax`), the
//! KL-to-clean-output attack used inside adversarial training (`KlMax`),
//! and the two uniformity-targeting detection attacks (`EntropyMax` for
//! ID→OOD, `EntropyMin` for OOD→ID). Each step moves by `α·sign(∇)`, clips
//! to the ε-ball around the clean point and then to the data box.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    /// Start from `x + U(−ε, ε)`.
    #[default]
    RandomUniform,
    /// Start from the clean point.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    /// Maximize cross-entropy against the given labels.
    CeMax,
    /// Maximize `KL(f(x) ‖ f(x+δ))` with the clean distribution held fixed.
    #[default]
    KlMax,
    /// Maximize `mean(z) − logsumexp(z)`: push towards uniform output.
    EntropyMax,
    /// Maximize `−(mean(z) − logsumexp(z))`: push away from uniform output.
    /// This is also cross-entropy against the uniform distribution.
    EntropyMin,
}

/// Which way a detection attack pushes its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Make in-distribution inputs look out-of-distribution.
    IdToOod,
    /// Make out-of-distribution inputs look in-distribution.
    OodToId,
}

impl Direction {
    pub fn objective(self) -> AttackObjective {
        match self {
            Direction::IdToOod => AttackObjective::EntropyMax,
            Direction::OodToId => AttackObjective::EntropyMin,
        }
    }
}

/// Per-dimension data box. A single-element `lo`/`hi` applies to every
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(Error::Config(format!(
                "box bounds need matching non-empty lo/hi, got {} and {}",
                self.lo.len(),
                self.hi.len()
            )));
        }
        for (l, h) in self.lo.iter().zip(&self.hi) {
            if !(l <= h) || l.is_nan() || h.is_nan() {
                return Err(Error::Config(format!("box bound lo {l} > hi {h}")));
            }
        }
        Ok(())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.lo.len() != 1 && self.lo.len() != d {
            return Err(Error::dim("box bounds", &[self.lo.len()], &[d]));
        }
        Ok(())
    }

    pub fn lo(&self, j: usize) -> f64 {
        if self.lo.len() == 1 {
            self.lo[0]
        } else {
            self.lo[j]
        }
    }

    pub fn hi(&self, j: usize) -> f64 {
        if self.hi.len() == 1 {
            self.hi[0]
        } else {
            self.hi[j]
        }
    }

    pub fn contains(&self, x: &Tensor) -> bool {
        let d = x.cols();
        x.data()
            .iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lo(i % d) && v <= self.hi(i % d))
    }

    /// Clamps every coordinate of a matrix into the box.
    pub fn clip(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = v.clamp(self.lo(i % d), self.hi(i % d));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    /// `None` leaves the input space unbounded.
    #[serde(default)]
    pub bounds: Option<BoxBounds>,
    #[serde(default)]
    pub init: AttackInit,
    /// Training and evaluation pick the objective per term or attack
    /// setting; this field only matters for direct `pgd` calls.
    #[serde(default)]
    pub objective: AttackObjective,
    /// Return the per-sample best iterate (clean point included) instead of
    /// the last one.
    #[serde(default)]
    pub track_best: bool,
}

impl AttackConfig {
    /// Step size `2.5·ε/N`, the usual convention for a given budget and step count.
    pub fn relative_step(epsilon: f64, steps: usize) -> f64 {
        if steps == 0 || epsilon == 0.0 {
            // any positive value; no step is taken or every step is projected away
            1.0
        } else {
            2.5 * epsilon / steps as f64
        }
    }

    /// KL-targeted adversary used inside TRADES-style training.
    pub fn training(epsilon: f64, steps: usize) -> Self {
        Self {
            epsilon,
            steps,
            step_size: Self::relative_step(epsilon, steps),
            bounds: None,
            init: AttackInit::RandomUniform,
            objective: AttackObjective::KlMax,
            track_best: false,
        }
    }

    /// Detection/classification adversary for low-dimensional data.
    pub fn evaluation(epsilon: f64, steps: usize) -> Self {
        Self {
            objective: AttackObjective::EntropyMax,
            ..Self::training(epsilon, steps)
        }
    }

    /// The image-scale evaluation adversary: ε = 8/255, 40 steps of 0.5/255
    /// in the `[0, 1]` pixel box.
    pub fn image_evaluation() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            steps: 40,
            step_size: 0.5 / 255.0,
            bounds: Some(BoxBounds::uniform(0.0, 1.0)),
            init: AttackInit::RandomUniform,
            objective: AttackObjective::EntropyMax,
            track_best: false,
        }
    }

    /// The image-scale training adversary: ε = 8/255, 10 steps of 2/255.
    pub fn image_training() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: 2.0 / 255.0,
            bounds: Some(BoxBounds::uniform(0.0, 1.0)),
            init: AttackInit::RandomUniform,
            objective: AttackObjective::KlMax,
            track_best: false,
        }
    }

    pub fn with_objective(mut self, objective: AttackObjective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_bounds(mut self, bounds: Option<BoxBounds>) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn with_init(mut self, init: AttackInit) -> Self {
        self.init = init;
        self
    }

    pub fn with_track_best(mut self, track_best: bool) -> Self {
        self.track_best = track_best;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and ≥ 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if let Some(b) = &self.bounds {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Tensor,
    /// `adversarial − clean`, exact elementwise.
    pub perturbation: Tensor,
    /// Mean objective per evaluated iterate. With `track_best` this is the
    /// mean of the per-sample best value so far, starting from the clean point.
    pub trace: Vec<f64>,
}

impl AttackResult {
    /// Writes `step,objective` rows.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,objective")?;
        for (i, v) in self.trace.iter().enumerate() {
            writeln!(f, "{i},{v}")?;
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clips `cand` to `[clean − ε, clean + ε]` and then to `[lo, hi]`.
///
/// The result satisfies `|a − clean| ≤ ε` and `clean + (a − clean) == a`
/// in floating point; rounding of `clean ± ε` is repaired by stepping one
/// ulp towards `clean`.
fn project(clean: f64, cand: f64, eps: f64, lo: f64, hi: f64) -> f64 {
    let mut a = cand.clamp(clean - eps, clean + eps).clamp(lo, hi);
    loop {
        let d = a - clean;
        if d.abs() <= eps && clean + d == a {
            return a;
        }
        a = if a > clean { a.next_down() } else { a.next_up() };
    }
}

struct Projector<'a> {
    clean: &'a Tensor,
    eps: f64,
    bounds: Option<&'a BoxBounds>,
}

impl Projector<'_> {
    fn apply(&self, adv: &mut Tensor) {
        let d = self.clean.cols();
        for (i, (a, &c)) in adv.data_mut().iter_mut().zip(self.clean.data()).enumerate() {
            let (lo, hi) = match self.bounds {
                Some(b) => (b.lo(i % d), b.hi(i % d)),
                None => (f64::NEG_INFINITY, f64::INFINITY),
            };
            *a = project(c, *a, self.eps, lo, hi);
        }
    }
}

struct ObjectiveEval {
    rows: Vec<f64>,
    grad: Option<Tensor>,
}

fn evaluate_objective(
    model: &Mlp,
    x: &Tensor,
    objective: AttackObjective,
    labels: Option<&[usize]>,
    target_log_probs: Option<&Tensor>,
    need_grad: bool,
) -> Result<ObjectiveEval> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.leaf(x.clone(), need_grad);
    let z = bound.forward(&mut g, xv)?;
    let rows = match objective {
        AttackObjective::CeMax => {
            let y = labels.ok_or_else(|| Error::Contract("ce_max attack needs labels".into()))?;
            g.cross_entropy_rows(z, y)?
        }
        AttackObjective::KlMax => {
            let target = target_log_probs.expect("kl target computed before the loop");
            let lt = g.constant(target.clone());
            let lq = g.log_softmax(z)?;
            g.kl_from_log_probs(lt, lq)?
        }
        AttackObjective::EntropyMax => g.uniformity_rows(z)?,
        AttackObjective::EntropyMin => {
            let u = g.uniformity_rows(z)?;
            g.scale(u, -1.0)
        }
    };
    let values = g.value(rows).data().to_vec();
    let grad = if need_grad {
        let total = g.sum(rows);
        let mut grads = g.backward(total)?;
        Some(grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
    } else {
        None
    };
    Ok(ObjectiveEval { rows: values, grad })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Projected gradient ascent on `cfg.objective` within the ℓ∞ ball of radius ε.
///
/// `labels` is required for `CeMax`. For `KlMax` the target is the model's
/// own (detached) output on the clean input. Clean inputs must lie inside
/// the configured box.
pub fn pgd<R: Rng + ?Sized>(
    model: &Mlp,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    cfg.validate()?;
    if !x.is_matrix() || x.cols() != model.input_dim() {
        return Err(Error::dim("pgd", x.shape(), &[x.rows(), model.input_dim()]));
    }
    if cfg.objective == AttackObjective::CeMax {
        let y = labels.ok_or_else(|| Error::Contract("ce_max attack needs labels".into()))?;
        if y.len() != x.rows() {
            return Err(Error::dim("pgd labels", &[x.rows()], &[y.len()]));
        }
    }
    if let Some(b) = &cfg.bounds {
        b.check_dim(x.cols())?;
        if !b.contains(x) {
            return Err(Error::Contract("clean input lies outside the attack box".into()));
        }
    }

    let target = match cfg.objective {
        AttackObjective::KlMax => {
            let z = model.logits(x)?;
            Some(Tensor::new(
                z.shape().to_vec(),
                tensor::log_softmax_rows(z.data(), z.cols()),
            )?)
        }
        _ => None,
    };
    let proj = Projector {
        clean: x,
        eps: cfg.epsilon,
        bounds: cfg.bounds.as_ref(),
    };

    let mut adv = x.clone();
    if cfg.init == AttackInit::RandomUniform {
        let eps = cfg.epsilon;
        for v in adv.data_mut() {
            *v += rng.gen_range(-eps..=eps);
        }
    }
    proj.apply(&mut adv);

    let n = x.rows();
    let d = x.cols();
    let mut trace = Vec::with_capacity(cfg.steps + 2);

    // (value, iterate) per row; only maintained with track_best
    let mut best: Option<(Vec<f64>, Tensor)> = None;
    let consider = |best: &mut Option<(Vec<f64>, Tensor)>, rows: &[f64], cand: &Tensor| {
        match best {
            None => *best = Some((rows.to_vec(), cand.clone())),
            Some((vals, pts)) => {
                for i in 0..n {
                    if rows[i] > vals[i] {
                        vals[i] = rows[i];
                        pts.data_mut()[i * d..(i + 1) * d].copy_from_slice(cand.row(i));
                    }
                }
            }
        }
    };

    if cfg.track_best {
        let clean = evaluate_objective(model, x, cfg.objective, labels, target.as_ref(), false)?;
        consider(&mut best, &clean.rows, x);
        trace.push(mean(&best.as_ref().expect("just set").0));
    }

    for _ in 0..cfg.steps {
        let eval = evaluate_objective(model, &adv, cfg.objective, labels, target.as_ref(), true)?;
        if cfg.track_best {
            consider(&mut best, &eval.rows, &adv);
            trace.push(mean(&best.as_ref().expect("set").0));
        } else {
            trace.push(mean(&eval.rows));
        }
        let grad = eval.grad.expect("gradient requested");
        for (a, &gv) in adv.data_mut().iter_mut().zip(grad.data()) {
            *a += cfg.step_size * sign(gv);
        }
        proj.apply(&mut adv);
    }

    if cfg.track_best {
        let last = evaluate_objective(model, &adv, cfg.objective, labels, target.as_ref(), false)?;
        consider(&mut best, &last.rows, &adv);
        let (vals, pts) = best.expect("set");
        trace.push(mean(&vals));
        adv = pts;
    }

    let perturbation = adv.zip_map(x, "perturbation", |a, c| a - c)?;
    Ok(AttackResult {
        adversarial: adv,
        perturbation,
        trace,
    })
}

/// Uniformity-targeting detection attack: `IdToOod` maximizes
/// `mean(z) − logsumexp(z)`, `OodToId` maximizes its negation.
pub fn detection_attack<R: Rng + ?Sized>(
    model: &Mlp,
    x: &Tensor,
    direction: Direction,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    let cfg = cfg.clone().with_objective(direction.objective());
    pgd(model, x, None, &cfg, rng)
}

/// Helper examples `x̃ = clip(x + 2δ)` and labels `ỹ = argmax f_std(x + δ)`.
pub fn make_helper_examples(
    model_std: &Mlp,
    x: &Tensor,
    delta: &Tensor,
    bounds: Option<&BoxBounds>,
) -> Result<(Tensor, Vec<usize>)> {
    if x.shape() != delta.shape() {
        return Err(Error::dim("make_helper_examples", x.shape(), delta.shape()));
    }
    let attacked = x.zip_map(delta, "make_helper_examples", |a, b| a + b)?;
    let labels = model_std.predict(&attacked)?;
    let doubled = x.zip_map(delta, "make_helper_examples", |a, b| a + 2.0 * b)?;
    let helper = match bounds {
        Some(b) => {
            b.check_dim(x.cols())?;
            b.clip(&doubled)
        }
        None => doubled,
    };
    Ok((helper, labels))
}
