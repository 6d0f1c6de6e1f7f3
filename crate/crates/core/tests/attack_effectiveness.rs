//! Detection attacks against the plain OE toy model: wherever an exhaustive
//! search of the ε-ball finds a flipped MSP decision, PGD should find one
//! too most of the time.

use std::path::Path;

use halo_core::attacks::{detection_attack, Direction};
use halo_core::experiments::{load_data, train, ExperimentConfig, Regime};
use halo_core::{Mlp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TAU: f64 = 0.9;
const GRID: usize = 31;

fn flagged_ood(model: &Mlp, x: &Tensor) -> Vec<bool> {
    let p = model.probabilities(x).unwrap();
    (0..x.rows())
        .map(|i| p.row(i).iter().cloned().fold(f64::MIN, f64::max) < TAU)
        .collect()
}

/// Does any lattice point of the ε-ball (clipped to the box) get the other decision?
fn flippable(model: &Mlp, c: &[f64], eps: f64, lo: f64, hi: f64, clean: bool) -> bool {
    let step = 2.0 * eps / (GRID - 1) as f64;
    let mut pts = Vec::with_capacity(GRID * GRID * 2);
    for i in 0..GRID {
        for j in 0..GRID {
            pts.push((c[0] - eps + i as f64 * step).clamp(lo, hi));
            pts.push((c[1] - eps + j as f64 * step).clamp(lo, hi));
        }
    }
    let x = Tensor::matrix(GRID * GRID, 2, pts).unwrap();
    flagged_ood(model, &x).into_iter().any(|f| f != clean)
}

#[test]
fn pgd_flips_most_boundary_adjacent_decisions_of_the_oe_model() {
    let base = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")).unwrap();
    let cfg = ExperimentConfig {
        n_test: 300,
        ..Regime::A.config(&base)
    };
    let data = load_data(&cfg, 0).unwrap();
    let model = train(&cfg, &data, 0, None, None).unwrap().model;
    let attack = cfg.eval_attack();
    let bounds = attack.bounds.clone().expect("toy attacks are boxed");
    let (lo, hi) = (bounds.lo(0), bounds.hi(0));

    let mut adjacent = 0;
    let mut flipped = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for x in [&data.test_id.features, &data.test_ood.features] {
        let clean = flagged_ood(&model, x);
        let up = detection_attack(&model, x, Direction::IdToOod, &attack, &mut rng).unwrap();
        let down = detection_attack(&model, x, Direction::OodToId, &attack, &mut rng).unwrap();
        let (up, down) = (flagged_ood(&model, &up.adversarial), flagged_ood(&model, &down.adversarial));
        for i in 0..x.rows() {
            if !flippable(&model, x.row(i), attack.epsilon, lo, hi, clean[i]) {
                continue;
            }
            adjacent += 1;
            // ID decisions are attacked towards OOD and vice versa
            let after = if clean[i] { down[i] } else { up[i] };
            flipped += usize::from(after != clean[i]);
        }
    }
    println!("{flipped}/{adjacent} boundary-adjacent decisions flipped by PGD");
    assert!(adjacent >= 20, "too few boundary-adjacent samples ({adjacent}) to judge");
    assert!(flipped * 2 > adjacent, "PGD flipped only {flipped} of {adjacent}");
}
