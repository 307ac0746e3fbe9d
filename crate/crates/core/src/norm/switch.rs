//! Switchable normalization: blends batch, layer, and instance moments
//! through two softmax-weighted simplex combinations (one for means, one
//! for variances) learned by backpropagation.

use crate::error::{Error, Result};
use crate::norm::moments::{region_moments, Pattern};
use crate::norm::{AffineParams, RunningStats};
use crate::tensor::FeatureMap;

/// Blend logits; the effective weights are `softmax(logits)` so they always
/// lie strictly inside the simplex. Order: batch, layer, instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchState {
    pub mean_logits: [f64; 3],
    pub var_logits: [f64; 3],
}

impl SwitchState {
    pub fn new() -> Self {
        Self {
            mean_logits: [0.0; 3],
            var_logits: [0.0; 3],
        }
    }

    pub fn mean_weights(&self) -> [f64; 3] {
        softmax3(self.mean_logits)
    }

    pub fn var_weights(&self) -> [f64; 3] {
        softmax3(self.var_logits)
    }
}

pub fn softmax3(logits: [f64; 3]) -> [f64; 3] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = [
        (logits[0] - m).exp(),
        (logits[1] - m).exp(),
        (logits[2] - m).exp(),
    ];
    let sum = e[0] + e[1] + e[2];
    [e[0] / sum, e[1] / sum, e[2] / sum]
}

#[derive(Debug, Clone)]
pub struct SwitchCache {
    shape: [usize; 4],
    input: Vec<f64>,
    /// Pre-affine standardized activations.
    t: Vec<f64>,
    /// Blended variance + eps per `(b, c)`.
    s2: Vec<f64>,
    mu_bn: Vec<f64>,
    var_bn: Vec<f64>,
    mu_ln: Vec<f64>,
    var_ln: Vec<f64>,
    mu_in: Vec<f64>,
    var_in: Vec<f64>,
    w_mean: [f64; 3],
    w_var: [f64; 3],
}

pub struct SwitchBackward {
    pub dx: FeatureMap,
    pub d_gamma: Vec<f64>,
    pub d_beta: Vec<f64>,
    pub d_mean_logits: [f64; 3],
    pub d_var_logits: [f64; 3],
}

struct BlendMoments {
    mu_bn: Vec<f64>,
    var_bn: Vec<f64>,
    mu_ln: Vec<f64>,
    var_ln: Vec<f64>,
    mu_in: Vec<f64>,
    var_in: Vec<f64>,
}

fn component_moments(x: &FeatureMap) -> Result<BlendMoments> {
    let (mu_ln, var_ln) = region_moments(x, Pattern::PerSample)?;
    let (mu_in, var_in) = region_moments(x, Pattern::PerSampleChannel)?;
    let (mu_bn, var_bn) = region_moments(x, Pattern::PerChannel)?;
    Ok(BlendMoments {
        mu_bn,
        var_bn,
        mu_ln,
        var_ln,
        mu_in,
        var_in,
    })
}

fn blended_forward(
    x: &FeatureMap,
    m: &BlendMoments,
    w_mean: [f64; 3],
    w_var: [f64; 3],
    affine: &AffineParams,
    eps: f64,
) -> Result<(FeatureMap, Vec<f64>, Vec<f64>)> {
    let shape = x.shape();
    let [b_n, c_n, _, _] = shape;
    let plane = x.plane_len();
    let data = x.data();
    let mut out = vec![0.0f64; data.len()];
    let mut t = vec![0.0f64; data.len()];
    let mut s2_all = vec![0.0f64; b_n * c_n];

    for b in 0..b_n {
        for c in 0..c_n {
            let bc = b * c_n + c;
            let mu = w_mean[0] * m.mu_bn[c] + w_mean[1] * m.mu_ln[b] + w_mean[2] * m.mu_in[bc];
            let var = w_var[0] * m.var_bn[c] + w_var[1] * m.var_ln[b] + w_var[2] * m.var_in[bc];
            let s2 = var + eps;
            if s2 <= 0.0 {
                return Err(Error::DegenerateVariance(s2));
            }
            s2_all[bc] = s2;
            let inv_s = 1.0 / s2.sqrt();
            let (g, bt) = (affine.gamma[c], affine.beta[c]);
            let start = bc * plane;
            for i in start..start + plane {
                let ti = (data[i] - mu) * inv_s;
                t[i] = ti;
                out[i] = g * ti + bt;
            }
        }
    }
    Ok((FeatureMap::new(shape, out)?, t, s2_all))
}

/// Train-mode forward. Returns the output, the raw input's per-channel batch
/// moments (for the running-stat update), and the backward cache.
pub fn train_forward(
    x: &FeatureMap,
    state: &SwitchState,
    affine: &AffineParams,
    eps: f64,
) -> Result<(FeatureMap, Vec<f64>, Vec<f64>, SwitchCache)> {
    let m = component_moments(x)?;
    let w_mean = state.mean_weights();
    let w_var = state.var_weights();
    let (y, t, s2) = blended_forward(x, &m, w_mean, w_var, affine, eps)?;
    let cache = SwitchCache {
        shape: x.shape(),
        input: x.data().to_vec(),
        t,
        s2,
        mu_bn: m.mu_bn.clone(),
        var_bn: m.var_bn.clone(),
        mu_ln: m.mu_ln,
        var_ln: m.var_ln,
        mu_in: m.mu_in,
        var_in: m.var_in,
        w_mean,
        w_var,
    };
    Ok((y, m.mu_bn, m.var_bn, cache))
}

/// Eval-mode forward: the batch component reads the stored running moments,
/// the per-sample components are recomputed as usual.
pub fn eval_forward(
    x: &FeatureMap,
    state: &SwitchState,
    running: &RunningStats,
    affine: &AffineParams,
    eps: f64,
) -> Result<FeatureMap> {
    let mut m = component_moments(x)?;
    m.mu_bn = running.mu.clone();
    m.var_bn = running.var.clone();
    let (y, _, _) = blended_forward(
        x,
        &m,
        state.mean_weights(),
        state.var_weights(),
        affine,
        eps,
    )?;
    Ok(y)
}

/// Exact backward through the blended moments, including each component
/// moment's dependence on the inputs and the softmax blend weights.
pub fn backward(
    grad_out: &FeatureMap,
    cache: &SwitchCache,
    affine: &AffineParams,
) -> Result<SwitchBackward> {
    if grad_out.shape() != cache.shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", cache.shape),
            got: format!("{:?}", grad_out.shape()),
        });
    }
    let [b_n, c_n, h_n, w_n] = cache.shape;
    let plane = h_n * w_n;
    let n_bn = (b_n * plane) as f64;
    let n_ln = (c_n * plane) as f64;
    let n_in = plane as f64;
    let g = grad_out.data();
    let a = &cache.input;
    let (w, wv) = (cache.w_mean, cache.w_var);

    let mut d_gamma = vec![0.0f64; c_n];
    let mut d_beta = vec![0.0f64; c_n];
    // Per-(b,c) sums of p = dt/S and q = -dt*t/(2*S^2).
    let mut p_sum = vec![0.0f64; b_n * c_n];
    let mut q_sum = vec![0.0f64; b_n * c_n];

    for b in 0..b_n {
        for c in 0..c_n {
            let bc = b * c_n + c;
            let gamma = affine.gamma[c];
            let s2 = cache.s2[bc];
            let inv_s = 1.0 / s2.sqrt();
            let start = bc * plane;
            let mut ps = 0.0;
            let mut qs = 0.0;
            for i in start..start + plane {
                let gi = g[i];
                let ti = cache.t[i];
                d_beta[c] += gi;
                d_gamma[c] += gi * ti;
                let dt = gi * gamma;
                ps += dt * inv_s;
                qs += -dt * ti / (2.0 * s2);
            }
            p_sum[bc] += ps;
            q_sum[bc] += qs;
        }
    }

    // Gradient reaching each component's moments.
    let mut d_mu_bn = vec![0.0f64; c_n];
    let mut d_var_bn = vec![0.0f64; c_n];
    let mut d_mu_ln = vec![0.0f64; b_n];
    let mut d_var_ln = vec![0.0f64; b_n];
    for b in 0..b_n {
        for c in 0..c_n {
            let bc = b * c_n + c;
            d_mu_bn[c] += -w[0] * p_sum[bc];
            d_var_bn[c] += wv[0] * q_sum[bc];
            d_mu_ln[b] += -w[1] * p_sum[bc];
            d_var_ln[b] += wv[1] * q_sum[bc];
        }
    }

    // Blend-weight gradients (then through the softmax).
    let mut dw = [0.0f64; 3];
    let mut dwv = [0.0f64; 3];
    for b in 0..b_n {
        for c in 0..c_n {
            let bc = b * c_n + c;
            dw[0] += -p_sum[bc] * cache.mu_bn[c];
            dw[1] += -p_sum[bc] * cache.mu_ln[b];
            dw[2] += -p_sum[bc] * cache.mu_in[bc];
            dwv[0] += q_sum[bc] * cache.var_bn[c];
            dwv[1] += q_sum[bc] * cache.var_ln[b];
            dwv[2] += q_sum[bc] * cache.var_in[bc];
        }
    }

    let mut dx = vec![0.0f64; g.len()];
    for b in 0..b_n {
        for c in 0..c_n {
            let bc = b * c_n + c;
            let gamma = affine.gamma[c];
            let s2 = cache.s2[bc];
            let inv_s = 1.0 / s2.sqrt();
            let d_mu_in_bc = -w[2] * p_sum[bc];
            let d_var_in_bc = wv[2] * q_sum[bc];
            let start = bc * plane;
            for i in start..start + plane {
                let dt = g[i] * gamma;
                let p = dt * inv_s;
                let ai = a[i];
                let mut grad = p;
                grad += d_mu_bn[c] / n_bn + d_mu_ln[b] / n_ln + d_mu_in_bc / n_in;
                grad += 2.0 / n_bn * (ai - cache.mu_bn[c]) * d_var_bn[c];
                grad += 2.0 / n_ln * (ai - cache.mu_ln[b]) * d_var_ln[b];
                grad += 2.0 / n_in * (ai - cache.mu_in[bc]) * d_var_in_bc;
                dx[i] = grad;
            }
        }
    }

    let d_mean_logits = softmax_backward(w, dw);
    let d_var_logits = softmax_backward(wv, dwv);

    Ok(SwitchBackward {
        dx: FeatureMap::new(cache.shape, dx)?,
        d_gamma,
        d_beta,
        d_mean_logits,
        d_var_logits,
    })
}

fn softmax_backward(w: [f64; 3], dw: [f64; 3]) -> [f64; 3] {
    let dot = w[0] * dw[0] + w[1] * dw[1] + w[2] * dw[2];
    [
        w[0] * (dw[0] - dot),
        w[1] * (dw[1] - dot),
        w[2] * (dw[2] - dot),
    ]
}
