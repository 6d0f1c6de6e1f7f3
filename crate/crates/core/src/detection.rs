//! OOD score functions over logits. Every detector is oriented so that a
//! higher score means "more out-of-distribution", and an input is flagged
//! OOD iff `score > τ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// `1 − max_i p_i`
    Msp,
    /// Shannon entropy `H(p)`
    Entropy,
    /// Negative free energy `−logsumexp(z)` at temperature 1
    Energy,
    /// Generalized entropy `Σ_{top M} p_i^γ (1 − p_i)^γ`
    Gen,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Msp => "msp",
            DetectorKind::Entropy => "entropy",
            DetectorKind::Energy => "energy",
            DetectorKind::Gen => "gen",
        }
    }
}

fn default_gen_gamma() -> f64 {
    0.1
}

fn default_gen_top_m() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detector {
    pub kind: DetectorKind,
    #[serde(default = "default_gen_gamma")]
    pub gen_gamma: f64,
    /// Upper bound on the number of classes GEN sums over; clamped to K.
    #[serde(default = "default_gen_top_m")]
    pub gen_top_m: usize,
    #[serde(default)]
    pub tau: Option<f64>,
}

impl Detector {
    pub fn new(kind: DetectorKind) -> Self {
        Self {
            kind,
            gen_gamma: default_gen_gamma(),
            gen_top_m: default_gen_top_m(),
            tau: None,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = Some(tau);
        self
    }

    /// GEN with an explicit `M` that must not exceed K.
    pub fn gen(gamma: f64, top_m: usize) -> Self {
        Self {
            kind: DetectorKind::Gen,
            gen_gamma: gamma,
            gen_top_m: top_m,
            tau: None,
        }
    }

    /// MSP detector flagging inputs whose max-probability falls below
    /// `max_prob_threshold` (so `τ = 1 − threshold` in score orientation).
    pub fn msp_at_confidence(max_prob_threshold: f64) -> Self {
        Self::new(DetectorKind::Msp).with_tau(1.0 - max_prob_threshold)
    }

    /// Report name; also written as a bare CSV field.
    pub fn label(&self) -> String {
        match self.kind {
            DetectorKind::Gen => format!("gen(gamma={};m={})", self.gen_gamma, self.gen_top_m),
            k => k.name().to_string(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!("detectors need K ≥ 2, got {num_classes}")));
        }
        if self.kind == DetectorKind::Gen {
            if !(self.gen_gamma > 0.0 && self.gen_gamma <= 1.0) {
                return Err(Error::Config(format!("gen_gamma must be in (0, 1], got {}", self.gen_gamma)));
            }
            if self.gen_top_m == 0 {
                return Err(Error::Config("gen_top_m must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of classes GEN sums over: `min(K, gen_top_m)`.
    fn gen_m(&self, k: usize) -> usize {
        self.gen_top_m.min(k)
    }

    /// One score per row of an `n×K` logit matrix.
    pub fn score(&self, logits: &Tensor) -> Result<Vec<f64>> {
        if !logits.is_matrix() {
            return Err(Error::dim("score", logits.shape(), &[0, 0]));
        }
        let k = logits.cols();
        self.validate(k)?;
        let mut out = Vec::with_capacity(logits.rows());
        for row in logits.data().chunks(k) {
            out.push(self.score_row(row));
        }
        Ok(out)
    }

    fn score_row(&self, z: &[f64]) -> f64 {
        let lse = tensor::logsumexp(z);
        match self.kind {
            DetectorKind::Energy => -lse,
            DetectorKind::Msp => {
                let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                1.0 - (zmax - lse).exp()
            }
            DetectorKind::Entropy => {
                let h: f64 = z
                    .iter()
                    .map(|&v| {
                        let lp = v - lse;
                        let p = lp.exp();
                        if p == 0.0 {
                            0.0
                        } else {
                            -p * lp
                        }
                    })
                    .sum();
                h.max(0.0)
            }
            DetectorKind::Gen => {
                // 1 − p_i is formed from the other classes' mass so that a
                // confident top class keeps full relative precision
                let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
                let top = tensor::argmax(z);
                let rest: f64 = e.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, v)| v).sum();
                let s = e[top] + rest;
                let mut pairs: Vec<(f64, f64)> = e
                    .iter()
                    .enumerate()
                    .map(|(j, &ej)| {
                        let others = if j == top { rest } else { s - ej };
                        (ej / s, others / s)
                    })
                    .collect();
                pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
                let g = self.gen_gamma;
                pairs
                    .iter()
                    .take(self.gen_m(z.len()))
                    .map(|&(p, q)| p.powf(g) * q.powf(g))
                    .sum()
            }
        }
    }

    /// `score > τ` per row.
    pub fn detect(&self, logits: &Tensor) -> Result<Vec<bool>> {
        let tau = self
            .tau
            .ok_or_else(|| Error::Config(format!("detector {} has no threshold τ", self.label())))?;
        Ok(self.score(logits)?.into_iter().map(|s| s > tau).collect())
    }
}

/// The detector set reported by default: entropy, MSP, energy and GEN.
pub fn default_detectors() -> Vec<Detector> {
    vec![
        Detector::new(DetectorKind::Entropy),
        Detector::new(DetectorKind::Msp),
        Detector::new(DetectorKind::Energy),
        Detector::new(DetectorKind::Gen),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn logits(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn labels_are_plain_csv_fields() {
        for d in default_detectors().into_iter().chain([Detector::gen(0.5, 3)]) {
            let l = d.label();
            assert!(!l.contains([',', '"', '\n']), "{l}");
        }
    }

    #[test]
    fn symmetric_binary_cases() {
        let z = logits(&[&[0.0, 0.0]]);
        assert_abs_diff_eq!(Detector::new(DetectorKind::Msp).score(&z).unwrap()[0], 0.5);
        assert_abs_diff_eq!(Detector::new(DetectorKind::Entropy).score(&z).unwrap()[0], LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(Detector::new(DetectorKind::Energy).score(&z).unwrap()[0], -LN2, epsilon = 1e-15);
    }

    #[test]
    fn one_hot_cases() {
        let z = logits(&[&[800.0, 0.0, 0.0]]);
        assert_eq!(Detector::new(DetectorKind::Msp).score(&z).unwrap()[0], 0.0);
        assert_eq!(Detector::new(DetectorKind::Entropy).score(&z).unwrap()[0], 0.0);
        assert_eq!(Detector::new(DetectorKind::Gen).score(&z).unwrap()[0], 0.0);
    }

    #[test]
    fn gen_raw_sum_by_direct_summation() {
        let z = logits(&[&[0.0, 0.0]]);
        let s = Detector::gen(0.1, 2).score(&z).unwrap()[0];
        // 2 · (0.5^0.1 · 0.5^0.1) = 2 · 0.5^0.2
        let oracle = 2.0 * 0.5f64.powf(0.2);
        assert_abs_diff_eq!(s, oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(oracle, 1.7411, epsilon = 1e-4);
    }

    #[test]
    fn gen_top_m_larger_than_k_is_clamped() {
        let z = logits(&[&[0.2, -0.3, 1.0]]);
        let a = Detector::gen(0.5, 3).score(&z).unwrap();
        let b = Detector::gen(0.5, 100).score(&z).unwrap();
        assert_eq!(a, b);
        assert!(Detector::gen(0.5, 0).score(&z).is_err());
    }

    #[test]
    fn detection_thresholds() {
        let z = logits(&[&[0.0, 0.0], &[5.0, 0.0], &[0.1, 0.0]]);
        let msp = Detector::msp_at_confidence(0.9);
        // max-prob below 0.9 ⇔ 1 − max-prob > 0.1
        assert_eq!(msp.detect(&z).unwrap(), vec![true, false, true]);
        let inf = Detector::new(DetectorKind::Entropy).with_tau(f64::INFINITY);
        assert!(inf.detect(&z).unwrap().iter().all(|&b| !b));
        let neg = Detector::new(DetectorKind::Entropy).with_tau(f64::NEG_INFINITY);
        assert!(neg.detect(&z).unwrap().iter().all(|&b| b));
        assert!(matches!(
            Detector::new(DetectorKind::Energy).detect(&z),
            Err(Error::Config(_))
        ));
    }

    fn logit_rows(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-8.0f64..8.0, k)
    }

    proptest! {
        #[test]
        fn orientation_uniform_above_one_hot(k in 2usize..8) {
            let uni = Tensor::zeros(&[1, k]);
            let mut hot = vec![0.0; k];
            hot[0] = 60.0;
            let hot = Tensor::from_rows(&[hot]).unwrap();
            for d in default_detectors() {
                let su = d.score(&uni).unwrap()[0];
                let sh = d.score(&hot).unwrap()[0];
                prop_assert!(su > sh, "{:?}: {} vs {}", d.kind, su, sh);
            }
        }

        #[test]
        fn msp_and_entropy_rank_identically_for_two_classes(rows in prop::collection::vec(logit_rows(2), 2..30)) {
            let z = Tensor::from_rows(&rows).unwrap();
            let msp = Detector::new(DetectorKind::Msp).score(&z).unwrap();
            let ent = Detector::new(DetectorKind::Entropy).score(&z).unwrap();
            for i in 0..rows.len() {
                for j in 0..rows.len() {
                    // skip pairs whose MSP values differ only by rounding
                    if (msp[i] - msp[j]).abs() > 1e-9 {
                        prop_assert_eq!(msp[i] < msp[j], ent[i] < ent[j]);
                    }
                }
            }
        }

        #[test]
        fn logit_shift_behaviour(row in logit_rows(4), c in -20.0f64..20.0) {
            let z = Tensor::from_rows(&[row.clone()]).unwrap();
            let shifted = Tensor::from_rows(&[row.iter().map(|v| v + c).collect::<Vec<_>>()]).unwrap();
            let e0 = Detector::new(DetectorKind::Energy).score(&z).unwrap()[0];
            let e1 = Detector::new(DetectorKind::Energy).score(&shifted).unwrap()[0];
            prop_assert!((e1 - (e0 - c)).abs() < 1e-12);
            for kind in [DetectorKind::Msp, DetectorKind::Entropy, DetectorKind::Gen] {
                let d = Detector::new(kind);
                let a = d.score(&z).unwrap()[0];
                let b = d.score(&shifted).unwrap()[0];
                prop_assert!((a - b).abs() < 1e-12, "{:?}", kind);
            }
        }
    }
}
