//! Training objectives built from five loss terms: clean cross-entropy, the
//! ID and OE KL robustness terms, the helper-example cross-entropy, the
//! OE-to-uniform term, and the optional helper term on OE data.
//!
//! Every objective is evaluated in two phases. [`find_adversaries`] runs the
//! inner-maximization attacks (skipping those whose terms have zero weight),
//! then [`compose`] builds the loss on a tape with the perturbations frozen.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{make_helper_examples, pgd, AttackConfig, AttackObjective, Direction};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{BoundMlp, Mlp, MlpGrads};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Oe,
    Sat,
    Trades,
    Hat,
    Aloe,
    Halo,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Oe => "oe",
            ObjectiveKind::Sat => "sat",
            ObjectiveKind::Trades => "trades",
            ObjectiveKind::Hat => "hat",
            ObjectiveKind::Aloe => "aloe",
            ObjectiveKind::Halo => "halo",
        }
    }

    /// Whether the objective reads an OE batch at all.
    pub fn uses_oe(self) -> bool {
        matches!(self, ObjectiveKind::Oe | ObjectiveKind::Aloe | ObjectiveKind::Halo)
    }
}

/// Coefficients for all objectives. `eta` doubles as the OE weight λ of the
/// OE and ALOE objectives and may be written `lambda` in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HaloConfig {
    pub objective: ObjectiveKind,
    #[serde(alias = "lambda")]
    pub eta: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub hat_oe_enabled: bool,
    pub oe_divergence: OeDivergence,
}

/// Direction of the OE uniformity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OeDivergence {
    /// `KL(𝒰 ‖ p)`, cross-entropy to uniform minus `ln K`. Its gradient in
    /// the logits is `p − 𝒰`, which stays large on saturated outputs.
    #[default]
    Reverse,
    /// `KL(p ‖ 𝒰) = ln K − H(p)`. Vanishing gradient once `p` saturates.
    Forward,
}

impl Default for HaloConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Halo,
            eta: 2.0,
            gamma: 0.5,
            beta1: 3.0,
            beta2: 3.0,
            hat_oe_enabled: false,
            oe_divergence: OeDivergence::default(),
        }
    }
}

impl HaloConfig {
    fn zeroed(objective: ObjectiveKind) -> Self {
        Self {
            objective,
            eta: 0.0,
            gamma: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            hat_oe_enabled: false,
            oe_divergence: OeDivergence::default(),
        }
    }

    pub fn oe(lambda: f64) -> Self {
        Self {
            eta: lambda,
            ..Self::zeroed(ObjectiveKind::Oe)
        }
    }

    pub fn sat() -> Self {
        Self::zeroed(ObjectiveKind::Sat)
    }

    pub fn trades(beta: f64) -> Self {
        Self {
            beta1: beta,
            ..Self::zeroed(ObjectiveKind::Trades)
        }
    }

    pub fn hat(beta: f64, gamma: f64) -> Self {
        Self {
            beta1: beta,
            gamma,
            ..Self::zeroed(ObjectiveKind::Hat)
        }
    }

    pub fn aloe(lambda: f64) -> Self {
        Self {
            eta: lambda,
            ..Self::zeroed(ObjectiveKind::Aloe)
        }
    }

    pub fn halo() -> Self {
        Self::default()
    }

    pub fn lambda(&self) -> f64 {
        self.eta
    }

    /// Sets β₁ = β₂ = β.
    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta1 = beta;
        self.beta2 = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Weight of each term for this objective; terms absent from the
    /// objective have weight 0.
    pub fn weight(&self, term: LossTerm) -> f64 {
        use LossTerm::*;
        use ObjectiveKind::*;
        let k = self.objective;
        match term {
            Ce => 1.0,
            IdKl => match k {
                Trades | Hat | Halo => self.beta1,
                _ => 0.0,
            },
            HelperCe => match k {
                Hat | Halo => self.gamma,
                _ => 0.0,
            },
            OeUniform => match k {
                Oe | Aloe | Halo => self.eta,
                _ => 0.0,
            },
            OeKl => match k {
                Halo => self.eta * self.beta2,
                _ => 0.0,
            },
            HatOe => match k {
                Halo if self.hat_oe_enabled => self.eta * self.gamma,
                _ => 0.0,
            },
        }
    }

    fn needs_id_attack(&self) -> bool {
        match self.objective {
            ObjectiveKind::Sat | ObjectiveKind::Aloe => true,
            ObjectiveKind::Trades | ObjectiveKind::Hat | ObjectiveKind::Halo => {
                self.weight(LossTerm::IdKl) > 0.0 || self.weight(LossTerm::HelperCe) > 0.0
            }
            ObjectiveKind::Oe => false,
        }
    }

    fn needs_oe_attack(&self) -> bool {
        match self.objective {
            ObjectiveKind::Aloe => self.weight(LossTerm::OeUniform) > 0.0,
            ObjectiveKind::Halo => self.weight(LossTerm::OeKl) > 0.0 || self.weight(LossTerm::HatOe) > 0.0,
            _ => false,
        }
    }

    fn needs_oe_batch(&self) -> bool {
        [LossTerm::OeUniform, LossTerm::OeKl, LossTerm::HatOe]
            .iter()
            .any(|&t| self.weight(t) > 0.0)
    }

    fn needs_helper(&self) -> bool {
        self.weight(LossTerm::HelperCe) > 0.0 || self.weight(LossTerm::HatOe) > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    /// Cross-entropy on ID inputs (attacked inputs for SAT and ALOE).
    Ce,
    IdKl,
    HelperCe,
    /// `KL(f(x′) ‖ U)` on OE inputs (attacked inputs for ALOE).
    OeUniform,
    OeKl,
    HatOe,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Ce,
        LossTerm::IdKl,
        LossTerm::HelperCe,
        LossTerm::OeUniform,
        LossTerm::OeKl,
        LossTerm::HatOe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::IdKl => "id_kl",
            LossTerm::HelperCe => "helper_ce",
            LossTerm::OeUniform => "oe_uniform",
            LossTerm::OeKl => "oe_kl",
            LossTerm::HatOe => "hat_oe",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub value: f64,
    pub weight: f64,
}

/// Loss value split by term. Only computed terms are present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: BTreeMap<LossTerm, TermValue>,
}

impl LossBreakdown {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        self.terms.get(&term).map(|t| t.value)
    }

    /// `Σ weight·value` over the present terms.
    pub fn recomposed(&self) -> f64 {
        self.terms.values().map(|t| t.weight * t.value).sum()
    }

    pub fn csv_header() -> String {
        let mut h = String::from("total");
        for t in LossTerm::ALL {
            h.push(',');
            h.push_str(t.name());
        }
        h
    }

    /// Total followed by every term, absent terms left empty.
    pub fn csv_fields(&self) -> String {
        let mut row = self.total.to_string();
        for t in LossTerm::ALL {
            row.push(',');
            if let Some(v) = self.get(t) {
                row.push_str(&v.to_string());
            }
        }
        row
    }
}

/// One optimization batch: labeled ID inputs and optional OE inputs.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub id: &'a Tensor,
    pub labels: &'a [usize],
    pub oe: Option<&'a Tensor>,
}

impl<'a> Batch<'a> {
    pub fn new(id: &'a Tensor, labels: &'a [usize], oe: Option<&'a Tensor>) -> Self {
        Self { id, labels, oe }
    }

    fn check(&self, cfg: &HaloConfig) -> Result<()> {
        if self.id.rows() == 0 {
            return Err(Error::Contract("empty ID batch".into()));
        }
        if self.labels.len() != self.id.rows() {
            return Err(Error::dim("batch labels", &[self.id.rows()], &[self.labels.len()]));
        }
        if cfg.needs_oe_batch() {
            match self.oe {
                None => return Err(Error::Contract(format!("{} objective needs an OE batch", cfg.objective.name()))),
                Some(oe) if oe.rows() == 0 => return Err(Error::Contract("empty OE batch".into())),
                Some(oe) if oe.cols() != self.id.cols() => {
                    return Err(Error::dim("OE batch", oe.shape(), self.id.shape()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn oe(&self) -> &'a Tensor {
        self.oe.expect("checked by Batch::check")
    }
}

/// Perturbed inputs found by the inner maximization, held fixed while the
/// outer loss is built.
#[derive(Debug, Clone, Default)]
pub struct Adversaries {
    /// `x + δ` for the ID batch.
    pub id_adv: Option<Tensor>,
    /// Helper examples `x̃ = clip(x + 2δ)` and labels `argmax f_std(x + δ)`.
    pub id_helper: Option<(Tensor, Vec<usize>)>,
    /// `x′ + δ` for the OE batch.
    pub oe_adv: Option<Tensor>,
    /// `x̃′ = clip(x′ + 2δ)` and the helper model's logits on `x′ + δ`.
    pub oe_helper: Option<(Tensor, Tensor)>,
    /// Number of PGD runs performed.
    pub attack_calls: usize,
}

/// Runs the attacks the objective needs: the ID attack first, then the OE
/// attack. `attack.objective` is overridden per objective (KL for the
/// TRADES family, cross-entropy for SAT/ALOE on ID data, CE-to-uniform for
/// ALOE on OE data).
pub fn find_adversaries<R: Rng + ?Sized>(
    model: &Mlp,
    helper: Option<&Mlp>,
    batch: &Batch<'_>,
    cfg: &HaloConfig,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<Adversaries> {
    cfg.validate()?;
    batch.check(cfg)?;
    if cfg.needs_helper() && helper.is_none() {
        return Err(Error::Config(format!(
            "{} with gamma = {} needs a helper model",
            cfg.objective.name(),
            cfg.gamma
        )));
    }
    let mut adv = Adversaries::default();
    let robust_family = matches!(cfg.objective, ObjectiveKind::Trades | ObjectiveKind::Hat | ObjectiveKind::Halo);

    if cfg.needs_id_attack() {
        let objective = if robust_family { AttackObjective::KlMax } else { AttackObjective::CeMax };
        let a = attack.clone().with_objective(objective);
        let res = pgd(model, batch.id, Some(batch.labels), &a, rng)?;
        adv.attack_calls += 1;
        if cfg.weight(LossTerm::HelperCe) > 0.0 {
            let h = helper.expect("checked above");
            adv.id_helper = Some(make_helper_examples(h, batch.id, &res.perturbation, attack.bounds.as_ref())?);
        }
        adv.id_adv = Some(res.adversarial);
    }

    if cfg.needs_oe_attack() {
        let objective = if robust_family {
            AttackObjective::KlMax
        } else {
            Direction::OodToId.objective()
        };
        let a = attack.clone().with_objective(objective);
        let oe = batch.oe();
        let res = pgd(model, oe, None, &a, rng)?;
        adv.attack_calls += 1;
        if cfg.weight(LossTerm::HatOe) > 0.0 {
            let h = helper.expect("checked above");
            let (tilde, _) = make_helper_examples(h, oe, &res.perturbation, attack.bounds.as_ref())?;
            adv.oe_helper = Some((tilde, h.logits(&res.adversarial)?));
        }
        adv.oe_adv = Some(res.adversarial);
    }
    Ok(adv)
}

/// Loss terms on a tape. Returns the total and each present term.
pub fn compose(
    g: &mut Graph,
    bound: &BoundMlp,
    batch: &Batch<'_>,
    cfg: &HaloConfig,
    adv: &Adversaries,
) -> Result<(Var, Vec<(LossTerm, Var, f64)>)> {
    cfg.validate()?;
    batch.check(cfg)?;
    let missing = |what: &str| Error::Contract(format!("{} objective: missing {what}", cfg.objective.name()));
    let attacked_ce = matches!(cfg.objective, ObjectiveKind::Sat | ObjectiveKind::Aloe);
    let mut terms = Vec::new();

    let id_adv = || adv.id_adv.as_ref().ok_or_else(|| missing("ID adversarial batch"));

    let ce = if attacked_ce {
        let x = g.constant(id_adv()?.clone());
        let z = bound.forward(g, x)?;
        g.cross_entropy(z, batch.labels)?
    } else {
        let x = g.constant(batch.id.clone());
        let z = bound.forward(g, x)?;
        let w = cfg.weight(LossTerm::IdKl);
        if w > 0.0 {
            let xa = g.constant(id_adv()?.clone());
            let za = bound.forward(g, xa)?;
            let kl = g.kl_div(z, za)?;
            terms.push((LossTerm::IdKl, kl, w));
        }
        g.cross_entropy(z, batch.labels)?
    };
    terms.insert(0, (LossTerm::Ce, ce, 1.0));

    let w = cfg.weight(LossTerm::HelperCe);
    if w > 0.0 {
        let (xt, yt) = adv.id_helper.as_ref().ok_or_else(|| missing("helper examples"))?;
        let x = g.constant(xt.clone());
        let z = bound.forward(g, x)?;
        let h = g.cross_entropy(z, yt)?;
        terms.push((LossTerm::HelperCe, h, w));
    }

    if cfg.needs_oe_batch() {
        let oe_input = if cfg.objective == ObjectiveKind::Aloe {
            adv.oe_adv.as_ref().ok_or_else(|| missing("OE adversarial batch"))?
        } else {
            batch.oe()
        };
        let x = g.constant(oe_input.clone());
        let z = bound.forward(g, x)?;
        let w = cfg.weight(LossTerm::OeUniform);
        if w > 0.0 {
            let u = match cfg.oe_divergence {
                OeDivergence::Reverse => g.kl_from_uniform(z)?,
                OeDivergence::Forward => g.kl_to_uniform(z)?,
            };
            terms.push((LossTerm::OeUniform, u, w));
        }
        let w = cfg.weight(LossTerm::OeKl);
        if w > 0.0 {
            let xa = adv.oe_adv.as_ref().ok_or_else(|| missing("OE adversarial batch"))?;
            let xa = g.constant(xa.clone());
            let za = bound.forward(g, xa)?;
            let kl = g.kl_div(z, za)?;
            terms.push((LossTerm::OeKl, kl, w));
        }
        let w = cfg.weight(LossTerm::HatOe);
        if w > 0.0 {
            let (xt, zstd) = adv.oe_helper.as_ref().ok_or_else(|| missing("OE helper examples"))?;
            let xt = g.constant(xt.clone());
            let zt = bound.forward(g, xt)?;
            let zs = g.constant(zstd.clone());
            let kl = g.kl_div(zt, zs)?;
            terms.push((LossTerm::HatOe, kl, w));
        }
    }

    let mut total: Option<Var> = None;
    for &(_, v, w) in &terms {
        let weighted = if w == 1.0 { v } else { g.scale(v, w) };
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    Ok((total.expect("CE is always present"), terms))
}

fn breakdown(g: &Graph, total: Var, terms: &[(LossTerm, Var, f64)]) -> LossBreakdown {
    LossBreakdown {
        total: g.value(total).item(),
        terms: terms
            .iter()
            .map(|&(t, v, w)| {
                (
                    t,
                    TermValue {
                        value: g.value(v).item(),
                        weight: w,
                    },
                )
            })
            .collect(),
    }
}

/// Loss value with the given (frozen) adversaries.
pub fn loss_with_adversaries(model: &Mlp, batch: &Batch<'_>, cfg: &HaloConfig, adv: &Adversaries) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let (total, terms) = compose(&mut g, &bound, batch, cfg, adv)?;
    Ok(breakdown(&g, total, &terms))
}

/// Loss value and parameter gradients with the given (frozen) adversaries.
pub fn loss_and_gradients(
    model: &Mlp,
    batch: &Batch<'_>,
    cfg: &HaloConfig,
    adv: &Adversaries,
) -> Result<(LossBreakdown, MlpGrads)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let (total, terms) = compose(&mut g, &bound, batch, cfg, adv)?;
    let grads = g.backward(total)?;
    Ok((breakdown(&g, total, &terms), bound.gradients(&grads, model)?))
}

/// Attack, then loss and gradients: one training step's worth of work.
pub fn training_step<R: Rng + ?Sized>(
    model: &Mlp,
    helper: Option<&Mlp>,
    batch: &Batch<'_>,
    cfg: &HaloConfig,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, MlpGrads, Adversaries)> {
    let adv = find_adversaries(model, helper, batch, cfg, attack, rng)?;
    let (loss, grads) = loss_and_gradients(model, batch, cfg, &adv)?;
    Ok((loss, grads, adv))
}

fn evaluate<R: Rng + ?Sized>(
    model: &Mlp,
    helper: Option<&Mlp>,
    batch: &Batch<'_>,
    cfg: &HaloConfig,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let adv = find_adversaries(model, helper, batch, cfg, attack, rng)?;
    loss_with_adversaries(model, batch, cfg, &adv)
}

/// `CE(f(x), y) + λ·KL(f(x′) ‖ U)`.
pub fn loss_oe(model: &Mlp, id: &Tensor, labels: &[usize], oe: &Tensor, lambda: f64) -> Result<LossBreakdown> {
    let cfg = HaloConfig::oe(lambda);
    loss_with_adversaries(model, &Batch::new(id, labels, Some(oe)), &cfg, &Adversaries::default())
}

/// Cross-entropy on PGD-attacked ID inputs.
pub fn loss_sat<R: Rng + ?Sized>(
    model: &Mlp,
    id: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    evaluate(model, None, &Batch::new(id, labels, None), &HaloConfig::sat(), attack, rng)
}

/// `CE(f(x), y) + β·KL(f(x) ‖ f(x + δ))` with δ from a KL-targeted attack.
pub fn loss_trades<R: Rng + ?Sized>(
    model: &Mlp,
    id: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    beta: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    evaluate(model, None, &Batch::new(id, labels, None), &HaloConfig::trades(beta), attack, rng)
}

/// TRADES plus `γ·CE(f(x̃), ỹ)` on helper examples.
#[allow(clippy::too_many_arguments)]
pub fn loss_hat<R: Rng + ?Sized>(
    model: &Mlp,
    helper: Option<&Mlp>,
    id: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    beta: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let cfg = HaloConfig::hat(beta, gamma);
    evaluate(model, helper, &Batch::new(id, labels, None), &cfg, attack, rng)
}

/// Attacked CE on ID data plus `λ·KL(f(x′ + δ) ‖ U)` with the OE points
/// attacked towards confident outputs.
pub fn loss_aloe<R: Rng + ?Sized>(
    model: &Mlp,
    id: &Tensor,
    labels: &[usize],
    oe: &Tensor,
    attack: &AttackConfig,
    lambda: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let cfg = HaloConfig::aloe(lambda);
    evaluate(model, None, &Batch::new(id, labels, Some(oe)), &cfg, attack, rng)
}

/// The joint objective: ID loss (CE, KL robustness, helper CE) plus
/// η × OE loss (uniformity, KL robustness, optional helper term).
#[allow(clippy::too_many_arguments)]
pub fn loss_halo<R: Rng + ?Sized>(
    model: &Mlp,
    helper: Option<&Mlp>,
    id: &Tensor,
    labels: &[usize],
    oe: &Tensor,
    cfg: &HaloConfig,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let cfg = HaloConfig {
        objective: ObjectiveKind::Halo,
        ..cfg.clone()
    };
    evaluate(model, helper, &Batch::new(id, labels, Some(oe)), &cfg, attack, rng)
}

/// `KL(f(x̃′) ‖ f_std(x′ + δ))` with `x̃′ = clip(x′ + 2δ)` and δ from the
/// KL attack on the OE batch.
pub fn loss_hat_oe_term<R: Rng + ?Sized>(
    model: &Mlp,
    helper: &Mlp,
    oe: &Tensor,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<f64> {
    let a = attack.clone().with_objective(AttackObjective::KlMax);
    let res = pgd(model, oe, None, &a, rng)?;
    let (tilde, _) = make_helper_examples(helper, oe, &res.perturbation, attack.bounds.as_ref())?;
    let z_std = helper.logits(&res.adversarial)?;
    let mut g = Graph::new();
    let zt = {
        let x = g.constant(tilde);
        let bound = model.bind(&mut g, false);
        bound.forward(&mut g, x)?
    };
    let zs = g.constant(z_std);
    let kl = g.kl_div(zt, zs)?;
    Ok(g.value(kl).item())
}
