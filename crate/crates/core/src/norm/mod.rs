//! Normalization layers: batch, batch-renorm, group, layer, instance,
//! switchable, and the composed group-then-batch layer, each with a
//! train/eval forward, an exact hand-derived backward, and running-statistic
//! management where the layer is batch dependent.

mod moments;
mod switch;

pub use moments::{region_moments, znorm_backward, znorm_forward, Pattern, ZNormCache};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;
use switch::{SwitchCache, SwitchState};

/// Forward-pass mode. Train mode computes batch statistics, caches for
/// backward, and updates running statistics; eval mode is pure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel scale and shift, initialized to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }
}

/// Running-moment update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Average {
    /// Exponential moving average with momentum `eta`.
    Ema,
    /// Cumulative moving average over all batches seen.
    Cma,
}

/// Per-channel running mean and variance used at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub eta: f64,
    pub average: Average,
    /// Number of batch updates absorbed (the CMA denominator).
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize, eta: f64, average: Average) -> Self {
        Self {
            mu: vec![0.0; channels],
            var: vec![1.0; channels],
            eta,
            average,
            updates: 0,
        }
    }

    /// Absorbs one batch's moments: EMA moves by `eta` toward the batch
    /// value, CMA keeps the arithmetic mean of every batch moment seen.
    pub fn update(&mut self, mu_b: &[f64], var_b: &[f64]) {
        debug_assert_eq!(mu_b.len(), self.mu.len());
        match self.average {
            Average::Ema => {
                let eta = self.eta;
                for (m, &b) in self.mu.iter_mut().zip(mu_b) {
                    *m += eta * (b - *m);
                }
                for (v, &b) in self.var.iter_mut().zip(var_b) {
                    *v += eta * (b - *v);
                }
            }
            Average::Cma => {
                let k = (self.updates + 1) as f64;
                for (m, &b) in self.mu.iter_mut().zip(mu_b) {
                    *m += (b - *m) / k;
                }
                for (v, &b) in self.var.iter_mut().zip(var_b) {
                    *v += (b - *v) / k;
                }
            }
        }
        self.updates += 1;
    }

    pub fn has_updates(&self) -> bool {
        self.updates > 0
    }
}

/// Order of the two stages in the composed layer variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOrder {
    GroupThenBatch,
    BatchThenGroup,
}

/// Which normalization a layer performs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    Batch,
    BatchRenorm {
        r_max: f64,
        d_max: f64,
    },
    Group {
        groups: usize,
    },
    Layer,
    Instance,
    Switch,
    /// Affine-free group normalization followed by batch normalization
    /// carrying the single affine pair.
    Continual {
        groups: usize,
    },
    ContinualVariant {
        groups: usize,
        order: StageOrder,
        tied_affine: bool,
    },
}

/// Parameter gradients accumulated by `backward`.
#[derive(Debug, Clone)]
pub struct NormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean_logits: [f64; 3],
    pub var_logits: [f64; 3],
}

impl NormGrads {
    fn zeros(channels: usize) -> Self {
        Self {
            gamma: vec![0.0; channels],
            beta: vec![0.0; channels],
            mean_logits: [0.0; 3],
            var_logits: [0.0; 3],
        }
    }

    pub fn clear(&mut self) {
        self.gamma.iter_mut().for_each(|v| *v = 0.0);
        self.beta.iter_mut().for_each(|v| *v = 0.0);
        self.mean_logits = [0.0; 3];
        self.var_logits = [0.0; 3];
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Simple(ZNormCache),
    Brn(BrnCache),
    Composed {
        first: ZNormCache,
        second: ZNormCache,
    },
    Switch(SwitchCache),
}

#[derive(Debug, Clone)]
struct BrnCache {
    shape: [usize; 4],
    /// `(a - mu_B) / (sigma_B + eps)` per element.
    u: Vec<f64>,
    r: Vec<f64>,
    d: Vec<f64>,
    sigma_b: Vec<f64>,
    /// `sigma_B + eps` per channel.
    scale: Vec<f64>,
}

/// One normalization layer with its parameters and state.
#[derive(Debug, Clone)]
pub struct NormLayer {
    kind: NormKind,
    channels: usize,
    eps: f64,
    pub affine: AffineParams,
    pub running: Option<RunningStats>,
    pub grads: NormGrads,
    blend: Option<SwitchState>,
    /// Pinned `(r, d)` correction vectors for gradient checking.
    frozen_renorm: Option<(Vec<f64>, Vec<f64>)>,
    cache: Option<Cache>,
    eval_warned: bool,
}

impl NormLayer {
    fn base(kind: NormKind, channels: usize, batch_stats: bool) -> Self {
        Self {
            kind,
            channels,
            eps: 1e-5,
            affine: AffineParams::identity(channels),
            running: batch_stats.then(|| RunningStats::new(channels, 0.1, Average::Ema)),
            grads: NormGrads::zeros(channels),
            blend: matches!(kind, NormKind::Switch).then(SwitchState::new),
            frozen_renorm: None,
            cache: None,
            eval_warned: false,
        }
    }

    pub fn batch(channels: usize) -> Self {
        Self::base(NormKind::Batch, channels, true)
    }

    pub fn batch_renorm(channels: usize, r_max: f64, d_max: f64) -> Self {
        Self::base(NormKind::BatchRenorm { r_max, d_max }, channels, true)
    }

    pub fn group(channels: usize, groups: usize) -> Result<Self> {
        check_groups(channels, groups)?;
        Ok(Self::base(NormKind::Group { groups }, channels, false))
    }

    pub fn layer_norm(channels: usize) -> Self {
        Self::base(NormKind::Layer, channels, false)
    }

    pub fn instance(channels: usize) -> Self {
        Self::base(NormKind::Instance, channels, false)
    }

    pub fn switch(channels: usize) -> Self {
        Self::base(NormKind::Switch, channels, true)
    }

    pub fn continual(channels: usize, groups: usize) -> Result<Self> {
        check_groups(channels, groups)?;
        Ok(Self::base(NormKind::Continual { groups }, channels, true))
    }

    pub fn continual_variant(
        channels: usize,
        groups: usize,
        order: StageOrder,
        tied_affine: bool,
    ) -> Result<Self> {
        check_groups(channels, groups)?;
        Ok(Self::base(
            NormKind::ContinualVariant {
                groups,
                order,
                tied_affine,
            },
            channels,
            true,
        ))
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_momentum(mut self, eta: f64) -> Self {
        if let Some(r) = &mut self.running {
            r.eta = eta;
        }
        self
    }

    pub fn with_average(mut self, average: Average) -> Self {
        if let Some(r) = &mut self.running {
            r.average = average;
        }
        self
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// True when the layer consumes mini-batch statistics in train mode and
    /// therefore carries running moments (BN, BRN, SN's BN path, CN's BN stage).
    pub fn is_batch_dependent(&self) -> bool {
        self.running.is_some()
    }

    /// Learnable parameter count (affine pair plus any blend logits).
    pub fn param_count(&self) -> usize {
        let blend = if self.blend.is_some() { 6 } else { 0 };
        self.affine.gamma.len() + self.affine.beta.len() + blend
    }

    pub fn blend_state(&self) -> Option<([f64; 3], [f64; 3])> {
        self.blend.as_ref().map(|b| (b.mean_logits, b.var_logits))
    }

    pub fn blend_logits_mut(&mut self) -> Option<(&mut [f64; 3], &mut [f64; 3])> {
        self.blend
            .as_mut()
            .map(|b| (&mut b.mean_logits, &mut b.var_logits))
    }

    /// Split mutable access to the affine parameters and gradient buffers.
    pub fn affine_and_grads_mut(&mut self) -> (&mut AffineParams, &mut NormGrads) {
        (&mut self.affine, &mut self.grads)
    }

    /// Split mutable access to the blend logits and their gradient buffers
    /// (`mean_logits`, `var_logits`, `grad_mean`, `grad_var`).
    #[allow(clippy::type_complexity)]
    pub fn blend_and_grads_mut(
        &mut self,
    ) -> Option<(&mut [f64; 3], &mut [f64; 3], &mut [f64; 3], &mut [f64; 3])> {
        let grads = &mut self.grads;
        self.blend.as_mut().map(move |b| {
            (
                &mut b.mean_logits,
                &mut b.var_logits,
                &mut grads.mean_logits,
                &mut grads.var_logits,
            )
        })
    }

    /// Replaces the running moments (used by the recalibration oracle).
    pub fn set_running_moments(&mut self, mu: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let stats = self
            .running
            .as_mut()
            .ok_or_else(|| Error::StructuralMismatch("layer has no running statistics".into()))?;
        if mu.len() != stats.mu.len() || var.len() != stats.var.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", stats.mu.len()),
                got: format!("{}/{}", mu.len(), var.len()),
            });
        }
        stats.mu = mu;
        stats.var = var;
        stats.updates += 1;
        Ok(())
    }

    /// The tensor whose per-channel moments feed this layer's running
    /// statistics: the group-normalized features for the group-first
    /// composed layer, the raw input otherwise.
    pub fn stat_source(&self, x: &FeatureMap) -> Result<FeatureMap> {
        match self.kind {
            NormKind::Continual { groups }
            | NormKind::ContinualVariant {
                groups,
                order: StageOrder::GroupThenBatch,
                ..
            } => {
                let affine = self.first_stage_affine();
                let (mu, var) = region_moments(x, Pattern::PerSampleGroup { groups })?;
                let (y, _) = znorm_forward(
                    x,
                    Pattern::PerSampleGroup { groups },
                    &mu,
                    &var,
                    affine,
                    self.eps,
                )?;
                Ok(y)
            }
            _ => Ok(x.clone()),
        }
    }

    /// Pins the current renorm correction `(r, d)` so repeated train-mode
    /// forwards see them as constants (gradient-check support). No-op for
    /// other kinds.
    pub fn freeze_renorm(&mut self) {
        if let Some(Cache::Brn(c)) = &self.cache {
            self.frozen_renorm = Some((c.r.clone(), c.d.clone()));
        }
    }

    pub fn unfreeze_renorm(&mut self) {
        self.frozen_renorm = None;
    }

    fn first_stage_affine(&self) -> Option<&AffineParams> {
        match self.kind {
            NormKind::ContinualVariant {
                tied_affine: true, ..
            } => Some(&self.affine),
            _ => None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        if x.channels() != self.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.channels),
                got: format!("{} channels", x.channels()),
            });
        }
        match mode {
            Mode::Train => self.train_forward(x),
            Mode::Eval => {
                if let Some(r) = &self.running {
                    if !r.has_updates() && !self.eval_warned {
                        self.eval_warned = true;
                        eprintln!(
                            "warning: eval-mode forward before any running-stat update \
                             (using initial mu=0, var=1)"
                        );
                    }
                }
                self.eval_forward(x)
            }
        }
    }

    fn train_forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let eps = self.eps;
        match self.kind {
            NormKind::Batch => {
                let (mu, var) = region_moments(x, Pattern::PerChannel)?;
                let (y, cache) =
                    znorm_forward(x, Pattern::PerChannel, &mu, &var, Some(&self.affine), eps)?;
                self.running_mut().update(&mu, &var);
                self.cache = Some(Cache::Simple(cache));
                Ok(y)
            }
            NormKind::BatchRenorm { r_max, d_max } => self.brn_train_forward(x, r_max, d_max),
            NormKind::Group { groups } => {
                self.per_sample_forward(x, Pattern::PerSampleGroup { groups }, true)
            }
            NormKind::Layer => self.per_sample_forward(x, Pattern::PerSample, true),
            NormKind::Instance => self.per_sample_forward(x, Pattern::PerSampleChannel, true),
            NormKind::Switch => {
                let state = self.blend.clone().expect("switch layer has blend state");
                let (y, mu_b, var_b, cache) = switch::train_forward(x, &state, &self.affine, eps)?;
                self.running_mut().update(&mu_b, &var_b);
                self.cache = Some(Cache::Switch(cache));
                Ok(y)
            }
            NormKind::Continual { groups } => {
                self.composed_train_forward(x, groups, StageOrder::GroupThenBatch, false)
            }
            NormKind::ContinualVariant {
                groups,
                order,
                tied_affine,
            } => self.composed_train_forward(x, groups, order, tied_affine),
        }
    }

    fn per_sample_forward(
        &mut self,
        x: &FeatureMap,
        pattern: Pattern,
        cache: bool,
    ) -> Result<FeatureMap> {
        let (mu, var) = region_moments(x, pattern)?;
        let (y, c) = znorm_forward(x, pattern, &mu, &var, Some(&self.affine), self.eps)?;
        if cache {
            self.cache = Some(Cache::Simple(c));
        }
        Ok(y)
    }

    fn brn_train_forward(&mut self, x: &FeatureMap, r_max: f64, d_max: f64) -> Result<FeatureMap> {
        let (mu_b, var_b) = region_moments(x, Pattern::PerChannel)?;
        let sigma_b: Vec<f64> = var_b.iter().map(|v| v.sqrt()).collect();
        let (r, d) = match &self.frozen_renorm {
            Some((r, d)) => (r.clone(), d.clone()),
            None => {
                let stats = self.running.as_ref().expect("brn has running stats");
                let mut r = vec![0.0; self.channels];
                let mut d = vec![0.0; self.channels];
                for c in 0..self.channels {
                    let sigma_r = stats.var[c].sqrt().max(self.eps);
                    r[c] = (sigma_b[c] / sigma_r).clamp(1.0 / r_max, r_max);
                    d[c] = ((mu_b[c] - stats.mu[c]) / sigma_r).clamp(-d_max, d_max);
                }
                (r, d)
            }
        };

        let shape = x.shape();
        let [b_n, c_n, _, _] = shape;
        let plane = x.plane_len();
        let data = x.data();
        let mut u = vec![0.0f64; data.len()];
        let mut out = vec![0.0f64; data.len()];
        let mut scale = vec![0.0f64; c_n];
        for c in 0..c_n {
            scale[c] = sigma_b[c] + self.eps;
        }
        for b in 0..b_n {
            for c in 0..c_n {
                let start = (b * c_n + c) * plane;
                let inv_s = 1.0 / scale[c];
                let (g, bt) = (self.affine.gamma[c], self.affine.beta[c]);
                for i in start..start + plane {
                    let ui = (data[i] - mu_b[c]) * inv_s;
                    u[i] = ui;
                    out[i] = g * (r[c] * ui + d[c]) + bt;
                }
            }
        }

        self.running_mut().update(&mu_b, &var_b);
        self.cache = Some(Cache::Brn(BrnCache {
            shape,
            u,
            r,
            d,
            sigma_b,
            scale,
        }));
        FeatureMap::new(shape, out)
    }

    fn composed_train_forward(
        &mut self,
        x: &FeatureMap,
        groups: usize,
        order: StageOrder,
        tied_affine: bool,
    ) -> Result<FeatureMap> {
        let eps = self.eps;
        let group_pattern = Pattern::PerSampleGroup { groups };
        let stage1_affine = tied_affine.then_some(&self.affine);
        match order {
            StageOrder::GroupThenBatch => {
                let (g_mu, g_var) = region_moments(x, group_pattern)?;
                let (mid, first) =
                    znorm_forward(x, group_pattern, &g_mu, &g_var, stage1_affine, eps)?;
                let (b_mu, b_var) = region_moments(&mid, Pattern::PerChannel)?;
                let (y, second) = znorm_forward(
                    &mid,
                    Pattern::PerChannel,
                    &b_mu,
                    &b_var,
                    Some(&self.affine),
                    eps,
                )?;
                self.running_mut().update(&b_mu, &b_var);
                self.cache = Some(Cache::Composed { first, second });
                Ok(y)
            }
            StageOrder::BatchThenGroup => {
                let (b_mu, b_var) = region_moments(x, Pattern::PerChannel)?;
                let (mid, first) =
                    znorm_forward(x, Pattern::PerChannel, &b_mu, &b_var, stage1_affine, eps)?;
                self.running_mut().update(&b_mu, &b_var);
                let (g_mu, g_var) = region_moments(&mid, group_pattern)?;
                let (y, second) =
                    znorm_forward(&mid, group_pattern, &g_mu, &g_var, Some(&self.affine), eps)?;
                self.cache = Some(Cache::Composed { first, second });
                Ok(y)
            }
        }
    }

    /// Pure evaluation forward; batch-dependent layers use stored running
    /// moments, per-sample layers recompute their per-sample moments.
    pub fn eval_forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let eps = self.eps;
        match self.kind {
            NormKind::Batch | NormKind::BatchRenorm { .. } => {
                let stats = self
                    .running
                    .as_ref()
                    .expect("batch layer has running stats");
                let (y, _) = znorm_forward(
                    x,
                    Pattern::PerChannel,
                    &stats.mu,
                    &stats.var,
                    Some(&self.affine),
                    eps,
                )?;
                Ok(y)
            }
            NormKind::Group { groups } => {
                self.per_sample_eval(x, Pattern::PerSampleGroup { groups })
            }
            NormKind::Layer => self.per_sample_eval(x, Pattern::PerSample),
            NormKind::Instance => self.per_sample_eval(x, Pattern::PerSampleChannel),
            NormKind::Switch => {
                let state = self.blend.as_ref().expect("switch layer has blend state");
                let stats = self
                    .running
                    .as_ref()
                    .expect("switch layer has running stats");
                switch::eval_forward(x, state, stats, &self.affine, eps)
            }
            NormKind::Continual { groups } => {
                self.composed_eval(x, groups, StageOrder::GroupThenBatch, false)
            }
            NormKind::ContinualVariant {
                groups,
                order,
                tied_affine,
            } => self.composed_eval(x, groups, order, tied_affine),
        }
    }

    fn per_sample_eval(&self, x: &FeatureMap, pattern: Pattern) -> Result<FeatureMap> {
        let (mu, var) = region_moments(x, pattern)?;
        let (y, _) = znorm_forward(x, pattern, &mu, &var, Some(&self.affine), self.eps)?;
        Ok(y)
    }

    fn composed_eval(
        &self,
        x: &FeatureMap,
        groups: usize,
        order: StageOrder,
        tied_affine: bool,
    ) -> Result<FeatureMap> {
        let eps = self.eps;
        let stats = self
            .running
            .as_ref()
            .expect("composed layer has running stats");
        let group_pattern = Pattern::PerSampleGroup { groups };
        let stage1_affine = tied_affine.then_some(&self.affine);
        match order {
            StageOrder::GroupThenBatch => {
                let (g_mu, g_var) = region_moments(x, group_pattern)?;
                let (mid, _) = znorm_forward(x, group_pattern, &g_mu, &g_var, stage1_affine, eps)?;
                let (y, _) = znorm_forward(
                    &mid,
                    Pattern::PerChannel,
                    &stats.mu,
                    &stats.var,
                    Some(&self.affine),
                    eps,
                )?;
                Ok(y)
            }
            StageOrder::BatchThenGroup => {
                let (mid, _) = znorm_forward(
                    x,
                    Pattern::PerChannel,
                    &stats.mu,
                    &stats.var,
                    stage1_affine,
                    eps,
                )?;
                let (g_mu, g_var) = region_moments(&mid, group_pattern)?;
                let (y, _) =
                    znorm_forward(&mid, group_pattern, &g_mu, &g_var, Some(&self.affine), eps)?;
                Ok(y)
            }
        }
    }

    /// Exact gradients for the last train-mode forward. Input gradients are
    /// returned; parameter gradients accumulate into `self.grads`. Running
    /// statistic updates and the renorm corrections carry no gradient.
    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardWithoutForward)?;
        match cache {
            Cache::Simple(c) => {
                let (dx, grads) = znorm_backward(grad_out, c, Some(&self.affine))?;
                let (dg, db) = grads.expect("affine gradients present");
                accumulate(&mut self.grads.gamma, &dg);
                accumulate(&mut self.grads.beta, &db);
                Ok(dx)
            }
            Cache::Brn(c) => {
                let (dx, dg, db) = brn_backward(&self.affine, grad_out, c)?;
                accumulate(&mut self.grads.gamma, &dg);
                accumulate(&mut self.grads.beta, &db);
                Ok(dx)
            }
            Cache::Composed { first, second } => {
                let tied = matches!(
                    self.kind,
                    NormKind::ContinualVariant {
                        tied_affine: true,
                        ..
                    }
                );
                let (d_mid, grads2) = znorm_backward(grad_out, second, Some(&self.affine))?;
                let (dg2, db2) = grads2.expect("affine gradients present");
                accumulate(&mut self.grads.gamma, &dg2);
                accumulate(&mut self.grads.beta, &db2);
                let stage1_affine = tied.then_some(&self.affine);
                let (dx, grads1) = znorm_backward(&d_mid, first, stage1_affine)?;
                if let Some((dg1, db1)) = grads1 {
                    accumulate(&mut self.grads.gamma, &dg1);
                    accumulate(&mut self.grads.beta, &db1);
                }
                Ok(dx)
            }
            Cache::Switch(c) => {
                let out = switch::backward(grad_out, c, &self.affine)?;
                accumulate(&mut self.grads.gamma, &out.d_gamma);
                accumulate(&mut self.grads.beta, &out.d_beta);
                for k in 0..3 {
                    self.grads.mean_logits[k] += out.d_mean_logits[k];
                    self.grads.var_logits[k] += out.d_var_logits[k];
                }
                Ok(out.dx)
            }
        }
    }

    fn running_mut(&mut self) -> &mut RunningStats {
        self.running.as_mut().expect("layer has running stats")
    }
}

/// Backward through the renorm layer with `r` and `d` held constant.
/// Returns `(dx, d_gamma, d_beta)`.
fn brn_backward(
    affine: &AffineParams,
    grad_out: &FeatureMap,
    c: &BrnCache,
) -> Result<(FeatureMap, Vec<f64>, Vec<f64>)> {
    if grad_out.shape() != c.shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", c.shape),
            got: format!("{:?}", grad_out.shape()),
        });
    }
    let [b_n, c_n, h_n, w_n] = c.shape;
    let plane = h_n * w_n;
    let n = (b_n * plane) as f64;
    let g = grad_out.data();

    // Channel sums of the gradient w.r.t. u and of grad * xhat, where
    // xhat = u * scale / sigma_b (zero when the batch is constant).
    let mut dx = vec![0.0f64; g.len()];
    let mut d_gamma = vec![0.0f64; c_n];
    let mut d_beta = vec![0.0f64; c_n];
    for ch in 0..c_n {
        let gamma = affine.gamma[ch];
        let r = c.r[ch];
        let d = c.d[ch];
        let s = c.scale[ch];
        let sigma = c.sigma_b[ch];
        let xhat_of_u = if sigma > 0.0 { s / sigma } else { 0.0 };

        let mut sum_gu = 0.0;
        let mut sum_gux = 0.0;
        let mut sum_g = 0.0;
        let mut sum_gy = 0.0;
        for b in 0..b_n {
            let start = (b * c_n + ch) * plane;
            for i in start..start + plane {
                let gu = g[i] * gamma * r;
                let xh = c.u[i] * xhat_of_u;
                sum_gu += gu;
                sum_gux += gu * xh;
                sum_g += g[i];
                sum_gy += g[i] * (r * c.u[i] + d);
            }
        }
        d_beta[ch] += sum_g;
        d_gamma[ch] += sum_gy;

        let mean_gu = sum_gu / n;
        let mean_gux = sum_gux / n;
        let sigma_over_s = sigma / s;
        let inv_s = 1.0 / s;
        for b in 0..b_n {
            let start = (b * c_n + ch) * plane;
            for i in start..start + plane {
                let gu = g[i] * gamma * r;
                let xh = c.u[i] * xhat_of_u;
                dx[i] = inv_s * (gu - mean_gu - xh * sigma_over_s * mean_gux);
            }
        }
    }
    Ok((FeatureMap::new(c.shape, dx)?, d_gamma, d_beta))
}

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::IndivisibleGroups { channels, groups });
    }
    Ok(())
}

fn accumulate(acc: &mut [f64], add: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(add) {
        *a += b;
    }
}

/// Standardizes `a` with externally supplied per-region moments:
/// `gamma * (a - mu) / sqrt(var + eps) + beta`.
pub fn z_normalize(
    a: &FeatureMap,
    pattern: Pattern,
    mu: &[f64],
    var: &[f64],
    params: &AffineParams,
    eps: f64,
) -> Result<FeatureMap> {
    let (y, _) = znorm_forward(a, pattern, mu, var, Some(params), eps)?;
    Ok(y)
}
