//! Feed-forward ReLU classifier, SGD with (Nesterov) momentum, and the
//! `halo-ckpt-v1` checkpoint format.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const CHECKPOINT_FORMAT: &str = "halo-ckpt-v1";

/// Multi-layer perceptron with ReLU hidden layers and linear output.
///
/// Weights are stored `fan_in × fan_out` so a batch `x: n×d` maps to
/// `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Per-parameter gradients (or any per-parameter buffer) shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Parameters of an [`Mlp`] registered as leaves of a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundMlp {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "need at least input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// He-uniform weights (`U(±√(6/fan_in))`) and zero biases, deterministic per seed.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// All-zero parameters; every input maps to zero logits.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|p| Tensor::zeros(&[p[0], p[1]]))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&s| Tensor::zeros(&[s])).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a model from explicit parameters, checking every shape.
    pub fn from_parts(layer_sizes: &[usize], weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Config(format!(
                "expected {layers} weight and bias tensors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].shape() != [pair[0], pair[1]] {
                return Err(Error::dim("Mlp::from_parts", &[pair[0], pair[1]], weights[l].shape()));
            }
            if biases[l].shape() != [pair[1]] {
                return Err(Error::dim("Mlp::from_parts", &[pair[1]], biases[l].shape()));
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.input_dim() {
            return Err(Error::dim("forward", x.shape(), &[x.rows(), self.input_dim()]));
        }
        Ok(())
    }

    /// Registers the parameters in `g`. `trainable` controls whether their
    /// gradients are materialized.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let weights = self.weights.iter().map(|w| g.leaf(w.clone(), trainable)).collect();
        let biases = self.biases.iter().map(|b| g.leaf(b.clone(), trainable)).collect();
        BoundMlp { weights, biases }
    }

    /// Logits for a batch without recording a tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w)?.add_row_vector(b)?;
            if l < last {
                for v in h.data_mut() {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(h)
    }

    /// Softmax probabilities for a batch.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::softmax_rows(&self.logits(x)?))
    }

    /// Class predictions, ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn to_checkpoint(&self, seed: Option<u64>, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.iter().map(|w| w.data().to_vec()).collect(),
            biases: self.biases.iter().map(|b| b.data().to_vec()).collect(),
            seed,
            config,
        }
    }

    pub fn save(&self, path: &Path, seed: Option<u64>, config: serde_json::Value) -> Result<()> {
        self.to_checkpoint(seed, config).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read(path)?.to_mlp()
    }

    /// Applies `f` to every (parameter, buffer) pair in layer order.
    fn zip_params_mut(&mut self, other: &MlpGrads, mut f: impl FnMut(&mut [f64], &[f64])) {
        for (w, g) in self.weights.iter_mut().zip(&other.weights) {
            f(w.data_mut(), g.data());
        }
        for (b, g) in self.biases.iter_mut().zip(&other.biases) {
            f(b.data_mut(), g.data());
        }
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add_bias(z, b)?;
            if l < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Extracts a gradient for every parameter, failing if any is absent.
    pub fn gradients(&self, grads: &Gradients, model: &Mlp) -> Result<MlpGrads> {
        let fetch = |vars: &[Var], params: &[Tensor], kind: &'static str| -> Result<Vec<Tensor>> {
            vars.iter()
                .zip(params)
                .map(|(&v, p)| match grads.get(v) {
                    Some(t) if t.shape() == p.shape() => Ok(t.clone()),
                    Some(t) => Err(Error::dim(kind, p.shape(), t.shape())),
                    // parameter did not reach the root, or was bound frozen
                    None => Ok(Tensor::zeros(p.shape())),
                })
                .collect()
        };
        Ok(MlpGrads {
            weights: fetch(&self.weights, model.weights(), "weight gradient")?,
            biases: fetch(&self.biases, model.biases(), "bias gradient")?,
        })
    }
}

impl MlpGrads {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            weights: model.weights().iter().map(|w| Tensor::zeros(w.shape())).collect(),
            biases: model.biases().iter().map(|b| Tensor::zeros(b.shape())).collect(),
        }
    }

    fn matches(&self, model: &Mlp) -> bool {
        self.weights.len() == model.weights.len()
            && self.biases.len() == model.biases.len()
            && self.weights.iter().zip(&model.weights).all(|(a, b)| a.shape() == b.shape())
            && self.biases.iter().zip(&model.biases).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .map(Tensor::max_abs)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be ≥ 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if self.nesterov && self.momentum == 0.0 {
            return Err(Error::Config("nesterov requires momentum > 0".into()));
        }
        Ok(())
    }
}

/// Stochastic gradient descent with optional (Nesterov) momentum and
/// decoupled-into-gradient weight decay.
///
/// Update per parameter: `g ← g + wd·θ`; `v ← μ·v + g`;
/// `θ ← θ − lr·(g + μ·v)` with Nesterov, `θ ← θ − lr·v` otherwise.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Option<MlpGrads>,
}

impl Sgd {
    /// A zero learning rate is accepted so that a frozen run is expressible.
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, velocity: None })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        if !grads.matches(model) {
            return Err(Error::Contract(
                "gradient set does not cover every parameter of the model".into(),
            ));
        }
        let SgdConfig {
            learning_rate: lr,
            momentum: mu,
            nesterov,
            weight_decay: wd,
        } = self.cfg;

        if mu == 0.0 {
            model.zip_params_mut(grads, |p, g| {
                for (t, &d) in p.iter_mut().zip(g) {
                    *t -= lr * (d + wd * *t);
                }
            });
            return Ok(());
        }

        let velocity = self.velocity.get_or_insert_with(|| MlpGrads::zeros_like(model));
        let mut vel_iter = velocity
            .weights
            .iter_mut()
            .chain(velocity.biases.iter_mut())
            .map(|t| t.data_mut());
        model.zip_params_mut(grads, |p, g| {
            let v = vel_iter.next().expect("velocity matches parameters");
            for ((t, &d), vel) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = d + wd * *t;
                *vel = mu * *vel + d;
                let upd = if nesterov { d + mu * *vel } else { *vel };
                *t -= lr * upd;
            }
        });
        Ok(())
    }
}

/// Serialized model: a versioned JSON document of flattened float arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub layer_sizes: Vec<usize>,
    /// Row-major `fan_in × fan_out` weights per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: Option<u64>,
    /// Echo of the training configuration, free-form.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_mlp(&self) -> Result<Mlp> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT})",
                self.format
            )));
        }
        validate_sizes(&self.layer_sizes)?;
        let n_layers = self.layer_sizes.len() - 1;
        if self.weights.len() != n_layers || self.biases.len() != n_layers {
            return Err(Error::Config("checkpoint layer count does not match layer_sizes".into()));
        }
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            weights.push(Tensor::matrix(pair[0], pair[1], self.weights[l].clone())?);
            biases.push(Tensor::new(vec![pair[1]], self.biases[l].clone())?);
        }
        Mlp::from_parts(&self.layer_sizes, weights, biases)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.to_mlp()?;
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_batch() -> (Tensor, Vec<usize>) {
        let x = Tensor::from_rows(&[
            [1.0, 2.0],
            [2.0, 3.0],
            [1.5, 2.5],
            [-1.0, -2.0],
            [-2.0, -3.0],
            [-1.5, -2.5],
        ])
        .unwrap();
        (x, vec![0, 0, 0, 1, 1, 1])
    }

    fn ce_and_grads(m: &Mlp, x: &Tensor, y: &[usize]) -> (f64, MlpGrads) {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let z = bound.forward(&mut g, xv).unwrap();
        let loss = g.cross_entropy(z, y).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item(), bound.gradients(&grads, m).unwrap())
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Mlp::init(&[2, 64, 64, 2], 3).unwrap();
        let b = Mlp::init(&[2, 64, 64, 2], 3).unwrap();
        let c = Mlp::init(&[2, 64, 64, 2], 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.num_params(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
        assert!(a.biases().iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(Mlp::init(&[2], 0), Err(Error::Config(_))));
        assert!(matches!(Mlp::init(&[2, 0, 2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn linear_model_without_hidden_layers() {
        let m = Mlp::init(&[2, 2], 1).unwrap();
        let x = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let z = m.logits(&x).unwrap();
        assert_eq!(z.data(), m.weights()[0].row(0));
    }

    #[test]
    fn zero_model_outputs_uniform() {
        let m = Mlp::zeros(&[2, 8, 3]).unwrap();
        let p = m.probabilities(&Tensor::from_rows(&[[5.0, -4.0]]).unwrap()).unwrap();
        for &v in p.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = Mlp::init(&[2, 16, 16, 3], 9).unwrap();
        let (x, _) = toy_batch();
        let full = m.logits(&x).unwrap();
        for i in 0..x.rows() {
            let single = m.logits(&x.select_rows(&[i]).unwrap()).unwrap();
            assert_eq!(single.data(), full.row(i));
        }
    }

    #[test]
    fn tape_forward_matches_direct_forward() {
        let m = Mlp::init(&[2, 16, 16, 3], 9).unwrap();
        let (x, _) = toy_batch();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = bound.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(z), &m.logits(&x).unwrap());
    }

    #[test]
    fn forward_dimension_error() {
        let m = Mlp::init(&[3, 4, 2], 0).unwrap();
        assert!(matches!(m.logits(&Tensor::zeros(&[2, 2])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = Mlp::init(&[2, 16, 16, 3], 5).unwrap();
        let (x, _) = toy_batch();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let xv = g.param(x.clone());
        let z = bound.forward(&mut g, xv).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        let analytic = grads.get(xv).unwrap();

        let h = 1e-5;
        let sum_logits = |t: &Tensor| m.logits(t).unwrap().data().iter().sum::<f64>();
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut q = x.clone();
            q.data_mut()[i] -= h;
            let numeric = (sum_logits(&p) - sum_logits(&q)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "coord {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn full_parameter_gradient_matches_finite_differences() {
        let m = Mlp::init(&[2, 6, 5, 3], 17).unwrap();
        let (x, _) = toy_batch();
        let y = vec![0, 1, 2, 0, 1, 2];
        let (_, analytic) = ce_and_grads(&m, &x, &y);
        let h = 1e-4;
        let loss_of = |mm: &Mlp| {
            let mut g = Graph::new();
            let z = g.constant(mm.logits(&x).unwrap());
            let l = g.cross_entropy(z, &y).unwrap();
            g.value(l).item()
        };
        let mut worst: f64 = 0.0;
        for l in 0..m.weights().len() {
            for i in 0..m.weights()[l].len() {
                let mut p = m.clone();
                p.weights[l].data_mut()[i] += h;
                let mut q = m.clone();
                q.weights[l].data_mut()[i] -= h;
                let num = (loss_of(&p) - loss_of(&q)) / (2.0 * h);
                let a = analytic.weights[l].data()[i];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            }
            for i in 0..m.biases()[l].len() {
                let mut p = m.clone();
                p.biases[l].data_mut()[i] += h;
                let mut q = m.clone();
                q.biases[l].data_mut()[i] -= h;
                let num = (loss_of(&p) - loss_of(&q)) / (2.0 * h);
                let a = analytic.biases[l].data()[i];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut m = Mlp::init(&[2, 4, 2], 0).unwrap();
        let before = m.clone();
        let (x, y) = toy_batch();
        let (_, grads) = ce_and_grads(&m, &x, &y);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.0,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
        })
        .unwrap();
        sgd.step(&mut m, &grads).unwrap();
        assert_eq!(m, before);
    }

    /// A 1×1 linear layer with zero input bias path is a scalar parameter `w`
    /// whose loss `w²` we differentiate by hand: g = 2w.
    fn scalar_model(w: f64) -> Mlp {
        Mlp::from_parts(
            &[1, 1],
            vec![Tensor::matrix(1, 1, vec![w]).unwrap()],
            vec![Tensor::vector(vec![0.0])],
        )
        .unwrap()
    }

    fn quad_grads(m: &Mlp) -> MlpGrads {
        let w = m.weights()[0].item();
        MlpGrads {
            weights: vec![Tensor::matrix(1, 1, vec![2.0 * w]).unwrap()],
            biases: vec![Tensor::vector(vec![0.0])],
        }
    }

    #[test]
    fn plain_sgd_on_quadratic() {
        let mut m = scalar_model(1.0);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            ..SgdConfig::default()
        })
        .unwrap();
        let g = quad_grads(&m);
        sgd.step(&mut m, &g).unwrap();
        assert_abs_diff_eq!(m.weights()[0].item(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn momentum_matches_closed_form_recurrence() {
        // Heavy ball on x²: x_{t+1} = x_t − lr·v_{t+1}, v_{t+1} = μ v_t + 2 x_t.
        // Equivalently x_{t+1} = (1 + μ − 2 lr) x_t − μ x_{t−1}.
        let (lr, mu) = (0.1, 0.9);
        for nesterov in [false, true] {
            let mut m = scalar_model(1.0);
            let mut sgd = Sgd::new(SgdConfig {
                learning_rate: lr,
                momentum: mu,
                nesterov,
                weight_decay: 0.0,
            })
            .unwrap();
            let mut xs = vec![1.0];
            for _ in 0..20 {
                let g = quad_grads(&m);
                sgd.step(&mut m, &g).unwrap();
                xs.push(m.weights()[0].item());
            }
            // Oracle: explicit two-term recurrence, independent of the optimizer state.
            let mut oracle = vec![1.0, 1.0 - lr * 2.0 * (if nesterov { 1.0 + mu } else { 1.0 })];
            for t in 1..20 {
                let (x, xp) = (oracle[t], oracle[t - 1]);
                let next = if nesterov {
                    // x_{t+1} = x_t − 2lr(1+μ)x_t + μ(x_t − x_{t−1}) + 2lr·μ·x_{t−1}
                    x - 2.0 * lr * (1.0 + mu) * x + mu * (x - xp) + 2.0 * lr * mu * xp
                } else {
                    (1.0 + mu - 2.0 * lr) * x - mu * xp
                };
                oracle.push(next);
            }
            for (a, b) in xs.iter().zip(&oracle) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn weight_decay_without_momentum() {
        let mut m = scalar_model(2.0);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..SgdConfig::default()
        })
        .unwrap();
        let zero = MlpGrads::zeros_like(&m);
        sgd.step(&mut m, &zero).unwrap();
        // θ − lr·wd·θ
        assert_abs_diff_eq!(m.weights()[0].item(), 2.0 - 0.1 * 0.5 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn step_rejects_mismatched_gradients() {
        let mut m = Mlp::init(&[2, 4, 2], 0).unwrap();
        let other = MlpGrads::zeros_like(&Mlp::init(&[2, 3, 2], 0).unwrap());
        let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
        assert!(matches!(sgd.step(&mut m, &other), Err(Error::Contract(_))));
        let mut missing = MlpGrads::zeros_like(&m);
        missing.biases.pop();
        assert!(matches!(sgd.step(&mut m, &missing), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_decreases_on_separable_batch() {
        let mut m = Mlp::init(&[2, 16, 16, 2], 1).unwrap();
        let (x, y) = toy_batch();
        let (initial, _) = ce_and_grads(&m, &x, &y);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.01,
            ..SgdConfig::default()
        })
        .unwrap();
        for _ in 0..50 {
            let (_, g) = ce_and_grads(&m, &x, &y);
            sgd.step(&mut m, &g).unwrap();
        }
        let (fin, _) = ce_and_grads(&m, &x, &y);
        assert!(fin <= 0.9 * initial, "{initial} → {fin}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Mlp::init(&[2, 64, 64, 2], 123).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path, Some(123), serde_json::json!({"note": "test"})).unwrap();
        let back = Mlp::load(&path).unwrap();
        assert_eq!(back, m);
        let (x, _) = toy_batch();
        assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());
    }

    #[test]
    fn truncated_checkpoint_fails_to_load() {
        let m = Mlp::init(&[2, 8, 2], 1).unwrap();
        let text = m.to_checkpoint(None, serde_json::Value::Null).to_json().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(Mlp::load(&path), Err(Error::Load { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let m = Mlp::init(&[2, 2], 1).unwrap();
        let mut ckpt = m.to_checkpoint(None, serde_json::Value::Null);
        ckpt.format = "halo-ckpt-v0".into();
        let text = ckpt.to_json().unwrap();
        assert!(Checkpoint::from_json(&text).is_err());
    }

    #[test]
    fn inconsistent_weights_are_rejected() {
        let m = Mlp::init(&[2, 3, 2], 1).unwrap();
        let mut ckpt = m.to_checkpoint(None, serde_json::Value::Null);
        ckpt.weights[1].pop();
        assert!(ckpt.to_mlp().is_err());
    }
}
