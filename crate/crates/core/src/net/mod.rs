//! Minimal trainable networks: an MLP and a small CNN assembled from a
//! layer stack, plain SGD, and a finite-difference verification harness.

mod gradcheck;
mod layers;
mod loss;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use layers::{Conv3x3, Dense, Flatten, GlobalAvgPool, Relu};
pub use loss::{cross_entropy_loss, mse_logits_loss, softmax};

use crate::error::{Error, Result};
use crate::norm::{Average, Mode, NormLayer, StageOrder};
use crate::rng::SeededRng;
use crate::tensor::FeatureMap;

/// Plain SGD hyperparameters.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, batch_size: usize) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Self {
            learning_rate,
            batch_size,
        }
    }
}

/// Normalization layer selector used by the stack builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSelect {
    None,
    Batch,
    BatchRenorm,
    Group,
    Layer,
    Instance,
    Switch,
    Continual,
    ContinualVariant,
}

/// Hyperparameters for building one normalization layer per hidden block.
#[derive(Debug, Clone)]
pub struct NormConfig {
    pub select: NormSelect,
    pub groups: usize,
    pub eps: f64,
    pub eta: f64,
    pub average: Average,
    pub r_max: f64,
    pub d_max: f64,
    pub order: StageOrder,
    pub tied_affine: bool,
}

impl NormConfig {
    pub fn new(select: NormSelect) -> Self {
        Self {
            select,
            groups: 32,
            eps: 1e-5,
            eta: 0.1,
            average: Average::Ema,
            r_max: 3.0,
            d_max: 5.0,
            order: StageOrder::GroupThenBatch,
            tied_affine: false,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn build(&self, channels: usize) -> Result<Option<NormLayer>> {
        let layer = match self.select {
            NormSelect::None => return Ok(None),
            NormSelect::Batch => NormLayer::batch(channels),
            NormSelect::BatchRenorm => NormLayer::batch_renorm(channels, self.r_max, self.d_max),
            NormSelect::Group => NormLayer::group(channels, self.groups)?,
            NormSelect::Layer => NormLayer::layer_norm(channels),
            NormSelect::Instance => NormLayer::instance(channels),
            NormSelect::Switch => NormLayer::switch(channels),
            NormSelect::Continual => NormLayer::continual(channels, self.groups)?,
            NormSelect::ContinualVariant => {
                NormLayer::continual_variant(channels, self.groups, self.order, self.tied_affine)?
            }
        };
        Ok(Some(
            layer
                .with_eps(self.eps)
                .with_momentum(self.eta)
                .with_average(self.average),
        ))
    }
}

/// One layer of a [`LayerStack`].
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv3x3),
    Relu(Relu),
    Norm(NormLayer),
    Flatten(Flatten),
    GlobalAvgPool(GlobalAvgPool),
    /// Dense head producing the logits; exactly one per stack.
    Classifier(Dense),
}

impl Layer {
    fn name(&self, index: usize) -> String {
        let kind = match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::Relu(_) => "relu",
            Layer::Norm(_) => "norm",
            Layer::Flatten(_) => "flatten",
            Layer::GlobalAvgPool(_) => "gap",
            Layer::Classifier(_) => "classifier",
        };
        format!("{index}.{kind}")
    }
}

/// An ordered stack of layers with a train/eval mode flag that propagates
/// to every normalization layer.
#[derive(Debug, Clone)]
pub struct LayerStack {
    layers: Vec<Layer>,
    mode: Mode,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let classifiers = layers
            .iter()
            .filter(|l| matches!(l, Layer::Classifier(_)))
            .count();
        if classifiers != 1 {
            return Err(Error::InvalidConfig(format!(
                "a stack needs exactly one classifier head, found {classifiers}"
            )));
        }
        Ok(Self {
            layers,
            mode: Mode::Train,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Forward pass under the current mode; train mode caches activations
    /// for backward and updates running statistics.
    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        match self.mode {
            Mode::Train => {
                let mut cur = x.clone();
                for layer in &mut self.layers {
                    cur = match layer {
                        Layer::Dense(l) | Layer::Classifier(l) => l.train_forward(&cur)?,
                        Layer::Conv(l) => l.train_forward(&cur)?,
                        Layer::Relu(l) => l.train_forward(&cur),
                        Layer::Norm(l) => l.forward(&cur, Mode::Train)?,
                        Layer::Flatten(l) => l.forward(&cur, true),
                        Layer::GlobalAvgPool(l) => l.forward(&cur, true),
                    };
                }
                Ok(cur)
            }
            Mode::Eval => self.eval_forward(x),
        }
    }

    /// Pure evaluation forward; usable concurrently on a shared stack.
    pub fn eval_forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.eval_forward_prefix(x, self.layers.len())
    }

    /// Evaluation forward through the first `n_layers` layers only,
    /// returning the input of layer `n_layers`.
    pub fn eval_forward_prefix(&self, x: &FeatureMap, n_layers: usize) -> Result<FeatureMap> {
        let mut cur = x.clone();
        for layer in &self.layers[..n_layers] {
            cur = match layer {
                Layer::Dense(l) | Layer::Classifier(l) => l.eval_forward(&cur)?,
                Layer::Conv(l) => l.eval_forward(&cur)?,
                Layer::Relu(l) => l.eval_forward(&cur),
                Layer::Norm(l) => l.eval_forward(&cur)?,
                Layer::Flatten(_) => {
                    let [b, c, h, w] = cur.shape();
                    FeatureMap::new([b, c * h * w, 1, 1], cur.data().to_vec())?
                }
                Layer::GlobalAvgPool(_) => GlobalAvgPool::default().forward(&cur, false),
            };
        }
        Ok(cur)
    }

    /// Backward pass for the last train-mode forward; parameter gradients
    /// accumulate into each layer, the input gradient is returned.
    pub fn backward(&mut self, grad_logits: &FeatureMap) -> Result<FeatureMap> {
        let mut grad = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = match layer {
                Layer::Dense(l) | Layer::Classifier(l) => l.backward(&grad)?,
                Layer::Conv(l) => l.backward(&grad)?,
                Layer::Relu(l) => l.backward(&grad)?,
                Layer::Norm(l) => l.backward(&grad)?,
                Layer::Flatten(l) => l.backward(&grad)?,
                Layer::GlobalAvgPool(l) => l.backward(&grad)?,
            };
        }
        Ok(grad)
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(|_, _, grad| grad.iter_mut().for_each(|g| *g = 0.0));
    }

    /// Visits `(name, params, grads)` for every learnable parameter array,
    /// including affine pairs and blend logits; running statistics are not
    /// parameters and are never visited.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [f64], &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let name = layer.name(i);
            match layer {
                Layer::Dense(l) | Layer::Classifier(l) => {
                    f(&format!("{name}.weight"), &mut l.weight, &mut l.grad_weight);
                    f(&format!("{name}.bias"), &mut l.bias, &mut l.grad_bias);
                }
                Layer::Conv(l) => {
                    f(&format!("{name}.weight"), &mut l.weight, &mut l.grad_weight);
                    f(&format!("{name}.bias"), &mut l.bias, &mut l.grad_bias);
                }
                Layer::Norm(l) => {
                    {
                        let (affine, grads) = l.affine_and_grads_mut();
                        f(
                            &format!("{name}.gamma"),
                            &mut affine.gamma,
                            &mut grads.gamma,
                        );
                        f(&format!("{name}.beta"), &mut affine.beta, &mut grads.beta);
                    }
                    if let Some((ml, vl, gml, gvl)) = l.blend_and_grads_mut() {
                        f(&format!("{name}.mean_logits"), &mut ml[..], &mut gml[..]);
                        f(&format!("{name}.var_logits"), &mut vl[..], &mut gvl[..]);
                    }
                }
                Layer::Relu(_) | Layer::Flatten(_) | Layer::GlobalAvgPool(_) => {}
            }
        }
    }

    /// Named read-only views of every parameter array and running-statistic
    /// vector, in stack order (checkpoint serialization).
    pub fn state_arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = layer.name(i);
            match layer {
                Layer::Dense(l) | Layer::Classifier(l) => {
                    out.push((format!("{name}.weight"), l.weight.clone()));
                    out.push((format!("{name}.bias"), l.bias.clone()));
                }
                Layer::Conv(l) => {
                    out.push((format!("{name}.weight"), l.weight.clone()));
                    out.push((format!("{name}.bias"), l.bias.clone()));
                }
                Layer::Norm(l) => {
                    out.push((format!("{name}.gamma"), l.affine.gamma.clone()));
                    out.push((format!("{name}.beta"), l.affine.beta.clone()));
                    if let Some((m, v)) = l.blend_state() {
                        out.push((format!("{name}.mean_logits"), m.to_vec()));
                        out.push((format!("{name}.var_logits"), v.to_vec()));
                    }
                    if let Some(r) = &l.running {
                        out.push((format!("{name}.running_mu"), r.mu.clone()));
                        out.push((format!("{name}.running_var"), r.var.clone()));
                    }
                }
                Layer::Relu(_) | Layer::Flatten(_) | Layer::GlobalAvgPool(_) => {}
            }
        }
        out
    }

    /// Restores arrays produced by [`state_arrays`] by name.
    pub fn load_state_arrays(&mut self, entries: &[(String, Vec<f64>)]) -> Result<()> {
        use std::collections::HashMap;
        let map: HashMap<&str, &Vec<f64>> = entries.iter().map(|(n, v)| (n.as_str(), v)).collect();
        let mut missing = Vec::new();
        self.visit_params_mut(|name, param, _| match map.get(name) {
            Some(v) if v.len() == param.len() => param.copy_from_slice(v),
            _ => missing.push(name.to_string()),
        });
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::Norm(l) = layer {
                let name = l_name(i);
                if let Some(r) = &mut l.running {
                    match (
                        map.get(format!("{name}.running_mu").as_str()),
                        map.get(format!("{name}.running_var").as_str()),
                    ) {
                        (Some(mu), Some(var))
                            if mu.len() == r.mu.len() && var.len() == r.var.len() =>
                        {
                            r.mu = (*mu).clone();
                            r.var = (*var).clone();
                            r.updates += 1;
                        }
                        _ => missing.push(format!("{name}.running_mu/var")),
                    }
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::StructuralMismatch(format!(
                "checkpoint is missing or mismatches: {}",
                missing.join(", ")
            )))
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense(l) | Layer::Classifier(l) => l.weight.len() + l.bias.len(),
                Layer::Conv(l) => l.weight.len() + l.bias.len(),
                Layer::Norm(l) => l.param_count(),
                Layer::Relu(_) | Layer::Flatten(_) | Layer::GlobalAvgPool(_) => 0,
            })
            .sum()
    }

    /// Indices of batch-dependent normalization layers, in stack order.
    pub fn batch_dependent_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Norm(n) if n.is_batch_dependent() => Some(i),
                _ => None,
            })
            .collect()
    }

    /// Pins every batch-renorm layer's correction vectors (gradient checks).
    pub fn freeze_renorm(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Norm(n) = layer {
                n.freeze_renorm();
            }
        }
    }

    /// Smallest `|pre-activation|` seen by any ReLU in the last train
    /// forward; finite-difference checks require a margin away from zero.
    pub fn min_relu_margin(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Relu(r) => Some(r.last_min_magnitude),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn l_name(index: usize) -> String {
    format!("{index}.norm")
}

/// One SGD step: `theta <- theta - lr * grad` for every learnable parameter.
/// Running statistics are untouched.
pub fn sgd_step(stack: &mut LayerStack, config: &SgdConfig) {
    let lr = config.learning_rate;
    stack.visit_params_mut(|_, params, grads| {
        for (p, g) in params.iter_mut().zip(grads.iter()) {
            *p -= lr * *g;
        }
    });
}

/// MLP: input -> [dense(h) -> norm -> relu]* -> classifier.
pub fn mlp(
    input_dim: usize,
    hidden: &[usize],
    classes: usize,
    norm: &NormConfig,
    rng: &SeededRng,
) -> Result<LayerStack> {
    let mut init = rng.substream("init");
    let mut layers = Vec::new();
    let mut dim = input_dim;
    for &h in hidden {
        layers.push(Layer::Dense(Dense::new(dim, h, &mut init)));
        if let Some(n) = norm.build(h)? {
            layers.push(Layer::Norm(n));
        }
        layers.push(Layer::Relu(Relu::new()));
        dim = h;
    }
    layers.push(Layer::Classifier(Dense::new(dim, classes, &mut init)));
    LayerStack::new(layers)
}

/// The two-hidden-layer 784-100-100-10 MLP used for the permuted-MNIST runs.
pub fn mlp_toy(norm: &NormConfig, rng: &SeededRng) -> Result<LayerStack> {
    mlp(784, &[100, 100], 10, norm, rng)
}

/// Small CNN for spatial inputs:
/// conv3x3(c_in -> c) -> norm -> relu -> conv3x3(c -> c) -> norm -> relu
/// -> global average pool -> classifier.
pub fn cnn_small(
    c_in: usize,
    c: usize,
    classes: usize,
    norm: &NormConfig,
    rng: &SeededRng,
) -> Result<LayerStack> {
    let mut init = rng.substream("init");
    let mut layers = Vec::new();
    layers.push(Layer::Conv(Conv3x3::new(c_in, c, &mut init)));
    if let Some(n) = norm.build(c)? {
        layers.push(Layer::Norm(n));
    }
    layers.push(Layer::Relu(Relu::new()));
    layers.push(Layer::Conv(Conv3x3::new(c, c, &mut init)));
    if let Some(n) = norm.build(c)? {
        layers.push(Layer::Norm(n));
    }
    layers.push(Layer::Relu(Relu::new()));
    layers.push(Layer::GlobalAvgPool(GlobalAvgPool::default()));
    layers.push(Layer::Classifier(Dense::new(c, classes, &mut init)));
    LayerStack::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_stack_gives_uniform_softmax() {
        let rng = SeededRng::new(1);
        let mut stack = mlp(4, &[3], 5, &NormConfig::new(NormSelect::None), &rng).unwrap();
        stack.visit_params_mut(|_, p, _| p.iter_mut().for_each(|v| *v = 0.0));
        let x = FeatureMap::new([2, 4, 1, 1], vec![0.3; 8]).unwrap();
        let logits = stack.forward(&x).unwrap();
        let probs = softmax(&logits);
        assert!(probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let rng = SeededRng::new(2);
        let mut stack = mlp_toy(&NormConfig::new(NormSelect::Batch), &rng).unwrap();
        let x = FeatureMap::filled([1, 784, 1, 1], 0.5);
        stack.forward(&x).unwrap(); // one train step to populate stats
        stack.set_mode(Mode::Eval);
        let a = stack.forward(&x).unwrap();
        let b = stack.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), [1, 10, 1, 1]);
    }

    #[test]
    fn sgd_zero_gradient_leaves_parameters_unchanged() {
        let rng = SeededRng::new(3);
        let mut stack = mlp(4, &[3], 2, &NormConfig::new(NormSelect::Batch), &rng).unwrap();
        let before = stack.state_arrays();
        stack.zero_grads();
        sgd_step(&mut stack, &SgdConfig::new(0.1, 10));
        assert_eq!(before, stack.state_arrays());
    }

    #[test]
    fn sgd_lr_one_with_grad_equal_param_zeroes_parameters() {
        let rng = SeededRng::new(4);
        let mut stack = mlp(4, &[3], 2, &NormConfig::new(NormSelect::None), &rng).unwrap();
        let snapshot: Vec<Vec<f64>> = {
            let mut v = Vec::new();
            stack.visit_params_mut(|_, p, _| v.push(p.to_vec()));
            v
        };
        let mut i = 0;
        stack.visit_params_mut(|_, _, g| {
            g.copy_from_slice(&snapshot[i]);
            i += 1;
        });
        sgd_step(&mut stack, &SgdConfig::new(1.0, 10));
        stack.visit_params_mut(|_, p, _| assert!(p.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn quadratic_descent_halves_distance_with_analytic_lr() {
        // L(theta) = 0.5 * (theta - t)^2 has gradient theta - t; one SGD
        // step with lr = 0.5 halves the distance to the optimum.
        let rng = SeededRng::new(5);
        let mut stack = mlp(1, &[], 1, &NormConfig::new(NormSelect::None), &rng).unwrap();
        let target = 2.0;
        let mut theta_before = 0.0;
        stack.visit_params_mut(|name, p, g| {
            if name.ends_with("weight") {
                theta_before = p[0];
                g[0] = p[0] - target;
            }
        });
        sgd_step(&mut stack, &SgdConfig::new(0.5, 1));
        stack.visit_params_mut(|name, p, _| {
            if name.ends_with("weight") {
                let before = (theta_before - target).abs();
                let after = (p[0] - target).abs();
                assert!((after - 0.5 * before).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn toy_mlp_produces_ten_logits() {
        let rng = SeededRng::new(6);
        let mut stack = mlp_toy(&NormConfig::new(NormSelect::Batch), &rng).unwrap();
        let x = FeatureMap::filled([3, 784, 1, 1], 0.1);
        let logits = stack.forward(&x).unwrap();
        assert_eq!(logits.shape(), [3, 10, 1, 1]);
    }

    #[test]
    fn training_step_reduces_loss_on_fixed_batch() {
        let rng = SeededRng::new(7);
        let mut stack = mlp(8, &[6], 3, &NormConfig::new(NormSelect::Batch), &rng).unwrap();
        let mut data_rng = rng.substream("data");
        let data: Vec<f64> = (0..4 * 8).map(|_| data_rng.gen_symmetric(1.0)).collect();
        let x = FeatureMap::new([4, 8, 1, 1], data).unwrap();
        let labels = [0usize, 1, 2, 0];
        let logits = stack.forward(&x).unwrap();
        let (loss0, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        stack.zero_grads();
        stack.backward(&grad).unwrap();
        sgd_step(&mut stack, &SgdConfig::new(1e-4, 4));
        let logits1 = stack.forward(&x).unwrap();
        let (loss1, _) = cross_entropy_loss(&logits1, &labels).unwrap();
        assert!(loss1 < loss0, "loss did not decrease: {loss0} -> {loss1}");
    }

    #[test]
    fn training_touches_stats_of_batch_dependent_layers_only() {
        let rng = SeededRng::new(8);
        for select in [NormSelect::Group, NormSelect::Layer, NormSelect::Instance] {
            let mut cfg = NormConfig::new(select);
            cfg.groups = 2;
            let stack = mlp(6, &[4], 2, &cfg, &rng).unwrap();
            assert!(stack.batch_dependent_layers().is_empty());
        }
        for select in [
            NormSelect::Batch,
            NormSelect::BatchRenorm,
            NormSelect::Switch,
            NormSelect::Continual,
        ] {
            let mut cfg = NormConfig::new(select);
            cfg.groups = 2;
            let mut stack = mlp(6, &[4], 2, &cfg, &rng).unwrap();
            assert_eq!(stack.batch_dependent_layers().len(), 1);
            // running stats change on a train step
            let before = stack.state_arrays();
            let x = FeatureMap::filled([4, 6, 1, 1], 0.3);
            stack.forward(&x).unwrap();
            let after = stack.state_arrays();
            let changed = before
                .iter()
                .zip(&after)
                .filter(|((n, a), (_, b))| n.contains("running") && a != b)
                .count();
            assert!(changed > 0, "running stats unchanged for {select:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let rng = SeededRng::new(9);
        let mut cfg = NormConfig::new(NormSelect::Switch);
        cfg.groups = 2;
        let mut stack = mlp(6, &[4], 3, &cfg, &rng).unwrap();
        let x = FeatureMap::filled([4, 6, 1, 1], 0.2);
        stack.forward(&x).unwrap();
        let saved = stack.state_arrays();
        let mut other = mlp(6, &[4], 3, &cfg, &SeededRng::new(999)).unwrap();
        other.load_state_arrays(&saved).unwrap();
        assert_eq!(saved, other.state_arrays());
    }
}
