//! The classifier network: two dense hidden layers, each followed by
//! dropout, and a softmax output layer.
//!
//! ```text
//! x ─ dense(H) ─ act ─ dropout(d) ─ dense(H) ─ act ─ dropout(d) ─ dense(C) ─ softmax
//! ```
//!
//! Weights are stored `(fan_in × fan_out)` so a row-major batch `X` maps to
//! `X · W + b`. Training uses the categorical cross-entropy loss; gradients
//! are derived by hand and averaged over the batch.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Argument(format!("unknown activation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub dropout_ratio: f64,
    pub output_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: crate::data::NUM_FEATURES,
            hidden_dim: 512,
            dropout_ratio: 0.2,
            output_classes: 2,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Argument("layer sizes must be positive".into()));
        }
        if self.output_classes < 2 {
            return Err(Error::Argument(format!(
                "need at least 2 output classes, got {}",
                self.output_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::Argument(format!(
                "dropout ratio must be in [0, 1), got {}",
                self.dropout_ratio
            )));
        }
        Ok(())
    }
}

/// A dense layer's weights `(fan_in × fan_out)` and bias `(fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vector,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: Vector::zeros(fan_out),
        }
    }

    fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    /// out(batch × fan_out) = x · W + b
    fn affine(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let n = self.fan_out();
        let mut out = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            out.extend_from_slice(self.bias.as_slice());
        }
        math::gemm_nn(x, batch, self.fan_in(), self.weights.as_slice(), n, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct NetworkParameters {
    config: NetworkConfig,
    pub hidden1: Dense,
    pub hidden2: Dense,
    pub output: Dense,
    // Bumped on every update so stale forward caches are detectable.
    generation: u64,
}

impl PartialEq for NetworkParameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.hidden1 == other.hidden1
            && self.hidden2 == other.hidden2
            && self.output == other.output
    }
}

/// Gradients with the same layout as [`NetworkParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden1: Dense,
    pub hidden2: Dense,
    pub output: Dense,
}

/// Class probabilities for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    pub probs: Vector,
}

impl PredictionVector {
    pub fn predicted_class(&self) -> usize {
        math::argmax(self.probs.as_slice())
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted_class()]
    }
}

pub enum Mode<'a> {
    /// Dropout active, activations cached for [`NetworkParameters::backward`].
    Train(&'a mut dyn RngCore),
    Infer,
}

/// Activations kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    batch: usize,
    input: Vec<f64>,
    act1: Vec<f64>,
    mask1: Option<Vec<f64>>,
    h1: Vec<f64>,
    act2: Vec<f64>,
    mask2: Option<Vec<f64>>,
    h2: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    /// Post-dropout output of hidden layer `layer` (1 or 2), `batch × H`.
    pub fn hidden_output(&self, layer: usize) -> &[f64] {
        match layer {
            1 => &self.h1,
            2 => &self.h2,
            _ => panic!("hidden layer index must be 1 or 2"),
        }
    }

    /// Dropout scale factors (0 or `1/(1-d)`) for hidden layer `layer`, or
    /// `None` when no dropout was applied.
    pub fn dropout_mask(&self, layer: usize) -> Option<&[f64]> {
        match layer {
            1 => self.mask1.as_deref(),
            2 => self.mask2.as_deref(),
            _ => panic!("hidden layer index must be 1 or 2"),
        }
    }
}

pub struct Forward {
    /// `batch × C` class probabilities.
    pub probs: Matrix,
    pub cache: Option<ForwardCache>,
}

fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Dense {
        weights: Matrix::from_vec(fan_in, fan_out, data).expect("finite init"),
        bias: Vector::zeros(fan_out),
    }
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {layer}")))
    }
}

impl NetworkParameters {
    /// Uniform fan-based initialization with zero biases, seeded from
    /// `config.seed`.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (i, h, c) = (config.input_dim, config.hidden_dim, config.output_classes);
        Ok(NetworkParameters {
            config: config.clone(),
            hidden1: glorot_uniform(&mut rng, i, h),
            hidden2: glorot_uniform(&mut rng, h, h),
            output: glorot_uniform(&mut rng, h, c),
            generation: 0,
        })
    }

    /// Assembles parameters from explicit layers, checking shapes against
    /// `config`.
    pub fn from_layers(config: NetworkConfig, hidden1: Dense, hidden2: Dense, output: Dense) -> Result<Self> {
        config.validate()?;
        let (i, h, c) = (config.input_dim, config.hidden_dim, config.output_classes);
        for (name, layer, fan_in, fan_out) in [
            ("hidden1", &hidden1, i, h),
            ("hidden2", &hidden2, h, h),
            ("output", &output, h, c),
        ] {
            if layer.weights.shape() != (fan_in, fan_out) || layer.bias.len() != fan_out {
                return Err(Error::Shape(format!(
                    "{name}: expected {fan_in}x{fan_out} weights and {fan_out} biases, got {}x{} and {}",
                    layer.weights.rows(),
                    layer.weights.cols(),
                    layer.bias.len()
                )));
            }
            check_finite(layer.weights.as_slice(), name)?;
            check_finite(layer.bias.as_slice(), name)?;
        }
        Ok(NetworkParameters {
            config,
            hidden1,
            hidden2,
            output,
            generation: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.output_classes
    }

    pub fn num_parameters(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn slices(&self) -> [&[f64]; 6] {
        [
            self.hidden1.weights.as_slice(),
            self.hidden1.bias.as_slice(),
            self.hidden2.weights.as_slice(),
            self.hidden2.bias.as_slice(),
            self.output.weights.as_slice(),
            self.output.bias.as_slice(),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.hidden1.weights.as_mut_slice(),
            self.hidden1.bias.as_mut_slice(),
            self.hidden2.weights.as_mut_slice(),
            self.hidden2.bias.as_mut_slice(),
            self.output.weights.as_mut_slice(),
            self.output.bias.as_mut_slice(),
        ]
    }

    /// All parameters concatenated: W1, b1, W2, b2, W3, b3.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        check_finite(flat, "parameter vector")?;
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        self.generation += 1;
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, mode: Mode<'_>) -> Result<Forward> {
        if x.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.config.input_dim
            )));
        }
        let batch = x.rows();
        let act = self.config.activation;
        let d = self.config.dropout_ratio;
        let (mut rng, train) = match mode {
            Mode::Train(rng) => (Some(rng), true),
            Mode::Infer => (None, false),
        };

        let mut act1 = self.hidden1.affine(x.as_slice(), batch);
        check_finite(&act1, "hidden layer 1")?;
        act1.iter_mut().for_each(|v| *v = act.apply(*v));
        let (h1, mask1) = dropout(&act1, d, rng.as_deref_mut());

        let mut act2 = self.hidden2.affine(&h1, batch);
        check_finite(&act2, "hidden layer 2")?;
        act2.iter_mut().for_each(|v| *v = act.apply(*v));
        let (h2, mask2) = dropout(&act2, d, rng.as_deref_mut());

        let mut probs = self.output.affine(&h2, batch);
        check_finite(&probs, "output layer")?;
        for row in probs.chunks_mut(self.config.output_classes) {
            math::softmax_in_place(row);
        }

        let probs_m = Matrix::from_vec(batch, self.config.output_classes, probs.clone())?;
        let cache = train.then(|| ForwardCache {
            generation: self.generation,
            batch,
            input: x.as_slice().to_vec(),
            act1,
            mask1,
            h1,
            act2,
            mask2,
            h2,
            probs,
        });
        Ok(Forward {
            probs: probs_m,
            cache,
        })
    }

    /// Inference-mode probabilities for a batch.
    pub fn predict_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x, Mode::Infer)?.probs)
    }

    pub fn predict(&self, features: &[f64]) -> Result<PredictionVector> {
        let x = Matrix::from_vec(1, features.len(), features.to_vec())?;
        let probs = self.predict_batch(&x)?.into_vec();
        Ok(PredictionVector {
            probs: Vector::new(probs),
        })
    }

    /// Mean cross-entropy of inference-mode predictions.
    pub fn loss(&self, x: &Matrix, targets: &[usize]) -> Result<f64> {
        let probs = self.predict_batch(x)?;
        check_targets(targets, x.rows(), self.num_classes())?;
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| math::cross_entropy_unchecked(probs.row(i), t))
            .sum();
        Ok(total / targets.len().max(1) as f64)
    }

    /// Batch-averaged gradient of the cross-entropy loss, using the dropout
    /// masks realized in `cache`.
    pub fn backward(&self, cache: &ForwardCache, targets: &[usize]) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::Usage(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let batch = cache.batch;
        check_targets(targets, batch, self.num_classes())?;
        let (i_dim, h, c) = (
            self.config.input_dim,
            self.config.hidden_dim,
            self.config.output_classes,
        );
        let act = self.config.activation;
        let scale = 1.0 / batch as f64;

        // softmax + cross-entropy: dL/dz = p - onehot(y)
        let mut dz3 = cache.probs.clone();
        for (row, &t) in dz3.chunks_mut(c).zip(targets) {
            row[t] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        let mut grads = Gradients {
            hidden1: Dense::zeros(i_dim, h),
            hidden2: Dense::zeros(h, h),
            output: Dense::zeros(h, c),
        };
        dense_grads(&mut grads.output, &cache.h2, &dz3, batch);

        let mut dz2 = vec![0.0; batch * h];
        math::gemm_nt(&dz3, batch, c, self.output.weights.as_slice(), h, &mut dz2);
        through_hidden(&mut dz2, &cache.act2, cache.mask2.as_deref(), act);
        dense_grads(&mut grads.hidden2, &cache.h1, &dz2, batch);

        let mut dz1 = vec![0.0; batch * h];
        math::gemm_nt(&dz2, batch, h, self.hidden2.weights.as_slice(), h, &mut dz1);
        through_hidden(&mut dz1, &cache.act1, cache.mask1.as_deref(), act);
        dense_grads(&mut grads.hidden1, &cache.input, &dz1, batch);

        Ok(grads)
    }

    /// Plain gradient descent: `p ← p − lr·g`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        self.apply_update(grads, |_, _, g| learning_rate * g)
    }

    /// Applies `p ← p − delta(slot, index, g)` to every parameter, leaving
    /// the parameters untouched if any result is non-finite.
    fn apply_update<F>(&mut self, grads: &Gradients, mut delta: F) -> Result<()>
    where
        F: FnMut(usize, usize, f64) -> f64,
    {
        if grads.shapes() != self.shapes() {
            return Err(Error::Shape("gradient shapes do not match parameters".into()));
        }
        let mut updated: Vec<Vec<f64>> = Vec::with_capacity(6);
        for (slot, (p, g)) in self.slices().into_iter().zip(grads.slices()).enumerate() {
            let mut next = Vec::with_capacity(p.len());
            for (j, (&pv, &gv)) in p.iter().zip(g).enumerate() {
                let v = pv - delta(slot, j, gv);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "update produced a non-finite value in parameter block {slot}"
                    )));
                }
                next.push(v);
            }
            updated.push(next);
        }
        for (dst, src) in self.slices_mut().into_iter().zip(&updated) {
            dst.copy_from_slice(src);
        }
        self.generation += 1;
        Ok(())
    }

    fn shapes(&self) -> [(usize, usize); 3] {
        [
            self.hidden1.weights.shape(),
            self.hidden2.weights.shape(),
            self.output.weights.shape(),
        ]
    }
}

fn check_targets(targets: &[usize], batch: usize, classes: usize) -> Result<()> {
    if targets.len() != batch {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Argument(format!(
            "target class {t} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Inverted dropout: zero with probability `d`, scale survivors by `1/(1-d)`.
fn dropout(values: &[f64], d: f64, rng: Option<&mut (dyn RngCore + '_)>) -> (Vec<f64>, Option<Vec<f64>>) {
    match rng {
        Some(rng) if d > 0.0 => {
            let keep = 1.0 / (1.0 - d);
            let mask: Vec<f64> = values
                .iter()
                .map(|_| if rng.gen::<f64>() < d { 0.0 } else { keep })
                .collect();
            let out = values.iter().zip(&mask).map(|(v, m)| v * m).collect();
            (out, Some(mask))
        }
        _ => (values.to_vec(), None),
    }
}

/// Turns dL/d(hidden output) into dL/d(pre-activation) in place.
fn through_hidden(grad: &mut [f64], act: &[f64], mask: Option<&[f64]>, activation: Activation) {
    match mask {
        Some(mask) => {
            for ((g, &a), &m) in grad.iter_mut().zip(act).zip(mask) {
                *g *= m * activation.derivative_from_output(a);
            }
        }
        None => {
            for (g, &a) in grad.iter_mut().zip(act) {
                *g *= activation.derivative_from_output(a);
            }
        }
    }
}

fn dense_grads(layer: &mut Dense, input: &[f64], dz: &[f64], batch: usize) {
    let (fan_in, fan_out) = layer.weights.shape();
    math::gemm_tn(input, batch, fan_in, dz, fan_out, layer.weights.as_mut_slice());
    let bias = layer.bias.as_mut_slice();
    for row in dz.chunks(fan_out) {
        for (b, &g) in bias.iter_mut().zip(row) {
            *b += g;
        }
    }
}

impl Gradients {
    fn slices(&self) -> [&[f64]; 6] {
        [
            self.hidden1.weights.as_slice(),
            self.hidden1.bias.as_slice(),
            self.hidden2.weights.as_slice(),
            self.hidden2.bias.as_slice(),
            self.output.weights.as_slice(),
            self.output.bias.as_slice(),
        ]
    }

    fn shapes(&self) -> [(usize, usize); 3] {
        [
            self.hidden1.weights.shape(),
            self.hidden2.weights.shape(),
            self.output.weights.shape(),
        ]
    }

    /// Same order as [`NetworkParameters::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd {
        learning_rate: f64,
    },
    /// Per-parameter step scaled by a running RMS of past gradients.
    RmsProp {
        learning_rate: f64,
        decay: f64,
        epsilon: f64,
    },
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Optimizer::Sgd { learning_rate }
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        Optimizer::RmsProp {
            learning_rate,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            Optimizer::Sgd { learning_rate } | Optimizer::RmsProp { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
        }
        if let Optimizer::RmsProp { decay, epsilon, .. } = *self {
            if !(0.0..1.0).contains(&decay) || !(epsilon > 0.0) {
                return Err(Error::Argument("rmsprop needs decay in [0,1) and epsilon > 0".into()));
            }
        }
        Ok(())
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::sgd(0.01)
    }
}

/// Optimizer plus whatever running state it keeps between steps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    optimizer: Optimizer,
    mean_square: Option<[Vec<f64>; 6]>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer) -> Self {
        OptimizerState {
            optimizer,
            mean_square: None,
        }
    }

    pub fn step(&mut self, params: &mut NetworkParameters, grads: &Gradients) -> Result<()> {
        match self.optimizer {
            Optimizer::Sgd { learning_rate } => params.sgd_step(grads, learning_rate),
            Optimizer::RmsProp {
                learning_rate,
                decay,
                epsilon,
            } => {
                let ms = self
                    .mean_square
                    .get_or_insert_with(|| grads.slices().map(|s| vec![0.0; s.len()]));
                let g = grads.slices();
                let mut next: [Vec<f64>; 6] = ms.clone();
                for (slot, acc) in next.iter_mut().enumerate() {
                    for (a, &gv) in acc.iter_mut().zip(g[slot]) {
                        *a = decay * *a + (1.0 - decay) * gv * gv;
                    }
                }
                params.apply_update(grads, |slot, j, gv| {
                    learning_rate * gv / (next[slot][j].sqrt() + epsilon)
                })?;
                *ms = next;
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn config(hidden: usize, classes: usize, dropout: f64, seed: u64) -> NetworkConfig {
        NetworkConfig {
            input_dim: 8,
            hidden_dim: hidden,
            dropout_ratio: dropout,
            output_classes: classes,
            activation: Activation::Relu,
            seed,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Max elementwise relative error. Gradients below 1e-3 in magnitude are
    /// compared against that floor instead, since the O(h²) truncation error
    /// of the central difference swamps their relative error.
    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    /// Smallest |pre-activation| over both hidden layers, in infer mode.
    fn kink_distance(params: &NetworkParameters, x: &Matrix) -> f64 {
        let z1 = params.hidden1.affine(x.as_slice(), x.rows());
        let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        let z2 = params.hidden2.affine(&a1, x.rows());
        z1.iter().chain(&z2).fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    fn check_gradients(cfg: &NetworkConfig, batch: usize) -> f64 {
        let params = NetworkParameters::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xabc);
        // Central differences straddling a ReLU kink are meaningless, so draw
        // inputs whose pre-activations all clear the kink by 10 steps.
        let x = loop {
            let x = random_input(&mut rng, batch, cfg.input_dim);
            if kink_distance(&params, &x) > 1e-2 {
                break x;
            }
        };
        let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..cfg.output_classes)).collect();
        let fwd = params.forward(&x, Mode::Train(&mut rng)).unwrap();
        let analytic = params.backward(fwd.cache.as_ref().unwrap(), &targets).unwrap().to_flat();
        let mut probe = params.clone();
        let numeric = math::numerical_gradient(
            |p| {
                probe.set_flat(p).unwrap();
                probe.loss(&x, &targets).unwrap()
            },
            &params.to_flat(),
            1e-3,
        )
        .unwrap();
        max_rel_err(&analytic, &numeric)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = NetworkConfig {
            input_dim: 9,
            ..config(8, 2, 0.0, 3)
        };
        let err = check_gradients(&cfg, 4);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn tanh_backward_matches_finite_differences() {
        let cfg = NetworkConfig {
            activation: Activation::Tanh,
            ..config(6, 3, 0.0, 11)
        };
        let err = check_gradients(&cfg, 3);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn init_rules() {
        let cfg = NetworkConfig::default();
        let a = NetworkParameters::init(&cfg).unwrap();
        let b = NetworkParameters::init(&cfg).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        for layer in [&a.hidden1, &a.hidden2, &a.output] {
            assert!(layer.bias.as_slice().iter().all(|&v| v == 0.0));
        }
        let limit = (6.0f64 / (8.0 + 512.0)).sqrt();
        assert!(a.hidden1.weights.as_slice().iter().all(|w| w.abs() <= limit));
        let c = NetworkParameters::init(&NetworkConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(NetworkParameters::init(&config(4, 1, 0.0, 0)).is_err());
        assert!(NetworkParameters::init(&config(4, 2, 1.0, 0)).is_err());
        assert!(NetworkParameters::init(&config(0, 2, 0.0, 0)).is_err());
    }

    #[test]
    fn zero_network_is_uniform() {
        let mut p = NetworkParameters::init(&config(5, 4, 0.2, 0)).unwrap();
        p.set_flat(&vec![0.0; p.num_parameters()]).unwrap();
        let pred = p.predict(&[0.3; 8]).unwrap();
        for &v in pred.probs.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn inference_is_deterministic_and_matches_zero_dropout_training() {
        let p = NetworkParameters::init(&config(16, 3, 0.0, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input(&mut rng, 10, 8);
        let a = p.predict_batch(&x).unwrap();
        assert_eq!(a, p.predict_batch(&x).unwrap());
        let train = p.forward(&x, Mode::Train(&mut rng)).unwrap();
        assert_eq!(train.probs, a);
    }

    #[test]
    fn probabilities_are_valid() {
        let p = NetworkParameters::init(&config(32, 5, 0.2, 9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&mut rng, 20, 8);
        for probs in [p.predict_batch(&x).unwrap(), p.forward(&x, Mode::Train(&mut rng)).unwrap().probs] {
            for r in 0..probs.rows() {
                let s: f64 = probs.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(probs.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn non_finite_input_names_layer() {
        let p = NetworkParameters::init(&config(4, 2, 0.0, 0)).unwrap();
        let mut big = p.clone();
        let mut flat = big.to_flat();
        flat.iter_mut().for_each(|v| *v = 1e200);
        big.set_flat(&flat).unwrap();
        let x = Matrix::from_vec(1, 8, vec![1e200; 8]).unwrap();
        match big.predict_batch(&x) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("hidden layer 1"), "{msg}"),
            other => panic!("expected numeric error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn saturated_prediction_has_no_output_signal() {
        let mut p = NetworkParameters::init(&config(4, 2, 0.0, 0)).unwrap();
        // logits (0, 1000) via a huge positive output bias on class 1
        let mut flat = p.to_flat();
        let n = flat.len();
        flat[n - 1] = 1000.0;
        p.set_flat(&flat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input(&mut rng, 1, 8);
        let fwd = p.forward(&x, Mode::Train(&mut rng)).unwrap();
        let g = p.backward(fwd.cache.as_ref().unwrap(), &[1]).unwrap();
        assert!(g.output.bias.as_slice().iter().all(|v| v.abs() <= 1e-9));
        assert!(g.output.weights.as_slice().iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn dropped_unit_gets_no_incoming_gradient() {
        let p = NetworkParameters::init(&config(16, 2, 0.5, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_input(&mut rng, 1, 8);
        let fwd = p.forward(&x, Mode::Train(&mut rng)).unwrap();
        let cache = fwd.cache.unwrap();
        let g = p.backward(&cache, &[0]).unwrap();
        let mask1 = cache.dropout_mask(1).unwrap();
        let dropped: Vec<usize> = (0..16).filter(|&j| mask1[j] == 0.0).collect();
        assert!(!dropped.is_empty());
        for j in dropped {
            for i in 0..8 {
                assert_eq!(g.hidden1.weights.get(i, j), 0.0);
            }
            assert_eq!(g.hidden1.bias[j], 0.0);
        }
        let mask2 = cache.dropout_mask(2).unwrap();
        for j in (0..16).filter(|&j| mask2[j] == 0.0) {
            for i in 0..16 {
                assert_eq!(g.hidden2.weights.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut p = NetworkParameters::init(&config(4, 2, 0.0, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input(&mut rng, 2, 8);
        let fwd = p.forward(&x, Mode::Train(&mut rng)).unwrap();
        let cache = fwd.cache.unwrap();
        let g = p.backward(&cache, &[0, 1]).unwrap();
        p.sgd_step(&g, 0.1).unwrap();
        assert!(matches!(p.backward(&cache, &[0, 1]), Err(Error::Usage(_))));
        assert!(p.forward(&x, Mode::Infer).unwrap().cache.is_none());
    }

    #[test]
    fn sgd_step_rules() {
        let p0 = NetworkParameters::init(&config(3, 2, 0.0, 1)).unwrap();
        let zeros = Gradients {
            hidden1: Dense::zeros(8, 3),
            hidden2: Dense::zeros(3, 3),
            output: Dense::zeros(3, 2),
        };
        let mut p = p0.clone();
        p.sgd_step(&zeros, 0.5).unwrap();
        assert_eq!(p, p0);

        let mut quarter = zeros.clone();
        quarter.output.bias = Vector::new(vec![0.25, 0.25]);
        let mut flat = p.to_flat();
        let n = flat.len();
        flat[n - 1] = 1.0;
        p.set_flat(&flat).unwrap();
        p.sgd_step(&quarter, 1.0).unwrap();
        assert_eq!(p.output.bias[1], 0.75);

        let mut g = zeros.clone();
        g.hidden2.weights = Matrix::from_vec(3, 3, (0..9).map(|i| i as f64 * 0.125).collect()).unwrap();
        let mut half = p0.clone();
        half.sgd_step(&g, 0.25).unwrap();
        half.sgd_step(&g, 0.25).unwrap();
        let mut full = p0.clone();
        full.sgd_step(&g, 0.5).unwrap();
        assert_eq!(half, full);

        assert!(matches!(p.sgd_step(&g, 0.0), Err(Error::Argument(_))));
        let mut huge = zeros;
        huge.output.bias = Vector::new(vec![f64::MAX, 0.0]);
        let before = p.clone();
        assert!(matches!(p.sgd_step(&huge, 1e10), Err(Error::Numeric(_))));
        assert_eq!(p, before);
    }

    #[test]
    fn rmsprop_first_step_has_fixed_magnitude() {
        // first step: ms = 0.1 g², so Δ = lr·g/(sqrt(0.1)|g| + eps) ≈ lr·sqrt(10)·sign(g)
        let mut p = NetworkParameters::init(&config(3, 2, 0.0, 1)).unwrap();
        let before = p.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input(&mut rng, 4, 8);
        let fwd = p.forward(&x, Mode::Train(&mut rng)).unwrap();
        let g = p.backward(fwd.cache.as_ref().unwrap(), &[0, 1, 1, 0]).unwrap();
        let mut state = OptimizerState::new(Optimizer::rmsprop(1e-3));
        state.step(&mut p, &g).unwrap();
        for ((a, b), gv) in before.iter().zip(p.to_flat()).zip(g.to_flat()) {
            if gv.abs() > 1e-6 {
                assert!(((a - b).abs() - 1e-3 * 10f64.sqrt()).abs() < 1e-6);
                assert_eq!((a - b).signum(), gv.signum());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn gradient_oracle_random_configs(
            hidden in prop::sample::select(vec![4usize, 8, 16]),
            classes in prop::sample::select(vec![2usize, 5]),
            seed in any::<u64>(),
        ) {
            let err = check_gradients(&config(hidden, classes, 0.0, seed), 3);
            prop_assert!(err <= 1e-4, "max relative error {}", err);
        }

        #[test]
        fn small_step_decreases_sample_loss(seed in any::<u64>()) {
            let mut p = NetworkParameters::init(&config(8, 2, 0.0, seed)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_input(&mut rng, 1, 8);
            let t = [rng.gen_range(0..2)];
            let before = p.loss(&x, &t).unwrap();
            let fwd = p.forward(&x, Mode::Train(&mut rng)).unwrap();
            let g = p.backward(fwd.cache.as_ref().unwrap(), &t).unwrap();
            p.sgd_step(&g, 1e-4).unwrap();
            prop_assert!(p.loss(&x, &t).unwrap() < before);
        }
    }
}
