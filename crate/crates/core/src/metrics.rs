//! Detection metrics (AUROC, FPR at a target TPR, AUPR) and classification
//! accuracy. OOD is the positive class throughout.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig, AttackObjective};
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::tensor::Tensor;

pub const REPORT_SCHEMA: &str = "halo-eval-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSetting {
    Clean,
    IdToOod,
    OodToId,
    Both,
}

impl AttackSetting {
    pub const ALL: [AttackSetting; 4] = [
        AttackSetting::Clean,
        AttackSetting::IdToOod,
        AttackSetting::OodToId,
        AttackSetting::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackSetting::Clean => "clean",
            AttackSetting::IdToOod => "id_to_ood",
            AttackSetting::OodToId => "ood_to_id",
            AttackSetting::Both => "both",
        }
    }

    pub fn attacks_id(self) -> bool {
        matches!(self, AttackSetting::IdToOod | AttackSetting::Both)
    }

    pub fn attacks_ood(self) -> bool {
        matches!(self, AttackSetting::OodToId | AttackSetting::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub setting: AttackSetting,
}

impl ScorePair {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>, setting: AttackSetting) -> Self {
        Self {
            id_scores,
            ood_scores,
            setting,
        }
    }

    /// Exchanges the roles of ID and OOD.
    pub fn swapped(&self) -> Self {
        Self {
            id_scores: self.ood_scores.clone(),
            ood_scores: self.id_scores.clone(),
            setting: self.setting,
        }
    }

    fn check(&self) -> Result<()> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return Err(Error::Contract(format!(
                "metrics need non-empty score lists (got {} ID, {} OOD)",
                self.id_scores.len(),
                self.ood_scores.len()
            )));
        }
        if self.id_scores.iter().chain(&self.ood_scores).any(|v| v.is_nan()) {
            return Err(Error::Contract("NaN score".into()));
        }
        Ok(())
    }

    /// All scores sorted descending, tagged `true` for OOD.
    fn sorted_desc(&self) -> Vec<(f64, bool)> {
        let mut all: Vec<(f64, bool)> = self
            .id_scores
            .iter()
            .map(|&s| (s, false))
            .chain(self.ood_scores.iter().map(|&s| (s, true)))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        all
    }
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counting one half (Mann–Whitney U with midranks).
pub fn auroc(sp: &ScorePair) -> Result<f64> {
    sp.check()?;
    let mut all = sp.sorted_desc();
    all.reverse();
    let n = all.len();
    // sum of OOD ranks (1-based, ascending), ties at their midrank
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos = all[i..j].iter().filter(|e| e.1).count();
        rank_sum += midrank * pos as f64;
        i = j;
    }
    let m = sp.ood_scores.len() as f64;
    let u = rank_sum - m * (m + 1.0) / 2.0;
    Ok(u / (m * sp.id_scores.len() as f64))
}

/// False-positive rate at the largest threshold whose TPR reaches
/// `tpr_target`. Decisions are `score > τ`; no interpolation.
pub fn fpr_at_tpr(sp: &ScorePair, tpr_target: f64) -> Result<f64> {
    sp.check()?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Contract(format!("tpr target must be in (0, 1], got {tpr_target}")));
    }
    let mut ood = sp.ood_scores.clone();
    ood.sort_by(|a, b| b.total_cmp(a));
    let n = ood.len();
    // smallest count m with m/n ≥ target; the threshold sits just below the m-th score
    let m = (1..=n)
        .find(|&m| m as f64 / n as f64 >= tpr_target)
        .unwrap_or(n);
    let cut = ood[m - 1];
    let fp = sp.id_scores.iter().filter(|&&s| s >= cut).count();
    Ok(fp as f64 / sp.id_scores.len() as f64)
}

pub fn fpr95(sp: &ScorePair) -> Result<f64> {
    fpr_at_tpr(sp, 0.95)
}

/// Step-wise area under the precision–recall curve, `Σ (R_k − R_{k−1})·P_k`,
/// sweeping thresholds over the distinct scores in descending order.
pub fn aupr(sp: &ScorePair) -> Result<f64> {
    sp.check()?;
    let all = sp.sorted_desc();
    let m = sp.ood_scores.len();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / m as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Fraction of argmax-correct predictions, optionally after a PGD
/// cross-entropy attack (the attack objective is forced to `CeMax`).
pub fn accuracy<R: Rng + ?Sized>(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    attack: Option<&AttackConfig>,
    rng: &mut R,
) -> Result<f64> {
    if labels.len() != x.rows() {
        return Err(Error::dim("accuracy", &[x.rows()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Contract("accuracy of an empty batch".into()));
    }
    let inputs = match attack {
        Some(cfg) => {
            let cfg = cfg.clone().with_objective(AttackObjective::CeMax);
            pgd(model, x, Some(labels), &cfg, rng)?.adversarial
        }
        None => x.clone(),
    };
    let pred = model.predict(&inputs)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub dataset: String,
    pub detector: String,
    pub setting: AttackSetting,
    pub auroc: f64,
    pub fpr95: f64,
    /// AUPR with OOD as the positive class.
    pub aupr_out: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl MetricCell {
    pub fn compute(dataset: &str, detector: &str, sp: &ScorePair) -> Result<Self> {
        Ok(Self {
            dataset: dataset.to_string(),
            detector: detector.to_string(),
            setting: sp.setting,
            auroc: auroc(sp)?,
            fpr95: fpr95(sp)?,
            aupr_out: aupr(sp)?,
            n_id: sp.id_scores.len(),
            n_ood: sp.ood_scores.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub cells: Vec<MetricCell>,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

pub const REPORT_CSV_HEADER: &str =
    "dataset,detector,setting,auroc,fpr95,aupr_out,n_id,n_ood,clean_accuracy,robust_accuracy";

impl EvalReport {
    pub fn new(cells: Vec<MetricCell>, clean_accuracy: f64, robust_accuracy: f64) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            cells,
            clean_accuracy,
            robust_accuracy,
        }
    }

    pub fn cell(&self, detector: &str, setting: AttackSetting) -> Option<&MetricCell> {
        self.cells
            .iter()
            .find(|c| c.detector == detector && c.setting == setting)
    }

    /// One row per cell; accuracies repeated on every row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                csv_field(&c.dataset),
                csv_field(&c.detector),
                c.setting.name(),
                c.auroc,
                c.fpr95,
                c.aupr_out,
                c.n_id,
                c.n_ood,
                self.clean_accuracy,
                self.robust_accuracy
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Schema(format!("unknown report schema {:?}", r.schema)));
        }
        Ok(r)
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
