//! Region-wise moment computation and the shared standardize/backward core.
//!
//! Every normalization layer partitions the tensor into regions that are
//! unions of whole `(b, c)` spatial planes: per channel (batch norm), per
//! sample (layer norm), per sample-channel (instance norm), or per
//! sample-group (group norm). Moments, standardization, and the exact
//! backward through the batch moments are implemented once over that
//! partition.

use crate::error::{Error, Result};
use crate::norm::AffineParams;
use crate::tensor::FeatureMap;

/// How tensor elements group into normalization regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// One region per channel, pooling batch and spatial axes.
    PerChannel,
    /// One region per sample, pooling channels and spatial axes.
    PerSample,
    /// One region per `(sample, channel)` pair, pooling spatial axes.
    PerSampleChannel,
    /// One region per `(sample, group)` pair; `channels % groups == 0`.
    PerSampleGroup { groups: usize },
}

impl Pattern {
    pub fn region_count(&self, shape: [usize; 4]) -> usize {
        let [b, c, _, _] = shape;
        match self {
            Pattern::PerChannel => c,
            Pattern::PerSample => b,
            Pattern::PerSampleChannel => b * c,
            Pattern::PerSampleGroup { groups } => b * groups,
        }
    }

    /// Elements per region (uniform across regions).
    pub fn region_len(&self, shape: [usize; 4]) -> usize {
        let [b, c, h, w] = shape;
        let plane = h * w;
        match self {
            Pattern::PerChannel => b * plane,
            Pattern::PerSample => c * plane,
            Pattern::PerSampleChannel => plane,
            Pattern::PerSampleGroup { groups } => (c / groups) * plane,
        }
    }

    /// Region owning the `(b, c)` plane.
    #[inline]
    pub fn region_of(&self, b: usize, c: usize, channels: usize) -> usize {
        match self {
            Pattern::PerChannel => c,
            Pattern::PerSample => b,
            Pattern::PerSampleChannel => b * channels + c,
            Pattern::PerSampleGroup { groups } => b * groups + c / (channels / groups),
        }
    }

    pub fn validate(&self, shape: [usize; 4]) -> Result<()> {
        if let Pattern::PerSampleGroup { groups } = self {
            if *groups == 0 || shape[1] % groups != 0 {
                return Err(Error::IndivisibleGroups {
                    channels: shape[1],
                    groups: *groups,
                });
            }
        }
        Ok(())
    }
}

/// Per-region mean and population variance (two sweeps, so variance is a
/// sum of squares and never negative).
pub fn region_moments(x: &FeatureMap, pattern: Pattern) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = x.shape();
    pattern.validate(shape)?;
    let [b_n, c_n, _, _] = shape;
    let regions = pattern.region_count(shape);
    let inv_len = 1.0 / pattern.region_len(shape) as f64;
    let plane = x.plane_len();
    let data = x.data();

    let mut mean = vec![0.0f64; regions];
    for b in 0..b_n {
        for c in 0..c_n {
            let start = (b * c_n + c) * plane;
            let sum: f64 = data[start..start + plane].iter().sum();
            mean[pattern.region_of(b, c, c_n)] += sum;
        }
    }
    for m in &mut mean {
        *m *= inv_len;
    }

    let mut var = vec![0.0f64; regions];
    for b in 0..b_n {
        for c in 0..c_n {
            let r = pattern.region_of(b, c, c_n);
            let mu = mean[r];
            let start = (b * c_n + c) * plane;
            let sum: f64 = data[start..start + plane]
                .iter()
                .map(|&v| {
                    let d = v - mu;
                    d * d
                })
                .sum();
            var[r] += sum;
        }
    }
    for v in &mut var {
        *v *= inv_len;
    }

    Ok((mean, var))
}

/// Cached forward state needed for the exact backward pass.
#[derive(Debug, Clone)]
pub struct ZNormCache {
    pub pattern: Pattern,
    pub shape: [usize; 4],
    /// Standardized activations `(x - mu) / sqrt(var + eps)`.
    pub xhat: Vec<f64>,
    /// `1 / sqrt(var + eps)` per region.
    pub inv_std: Vec<f64>,
}

/// Standardizes `x` with the given per-region moments and applies the
/// optional per-channel affine transform.
pub fn znorm_forward(
    x: &FeatureMap,
    pattern: Pattern,
    mean: &[f64],
    var: &[f64],
    affine: Option<&AffineParams>,
    eps: f64,
) -> Result<(FeatureMap, ZNormCache)> {
    let shape = x.shape();
    pattern.validate(shape)?;
    let regions = pattern.region_count(shape);
    if mean.len() != regions || var.len() != regions {
        return Err(Error::ShapeMismatch {
            expected: format!("{regions} region moments"),
            got: format!("{} means, {} vars", mean.len(), var.len()),
        });
    }
    if let Some(a) = affine {
        if a.gamma.len() != shape[1] || a.beta.len() != shape[1] {
            return Err(Error::ShapeMismatch {
                expected: format!("affine length {}", shape[1]),
                got: format!("{}/{}", a.gamma.len(), a.beta.len()),
            });
        }
    }

    let mut inv_std = vec![0.0f64; regions];
    for (i, &v) in var.iter().enumerate() {
        let denom = v + eps;
        if denom <= 0.0 {
            return Err(Error::DegenerateVariance(denom));
        }
        inv_std[i] = 1.0 / denom.sqrt();
    }

    let [b_n, c_n, _, _] = shape;
    let plane = x.plane_len();
    let data = x.data();
    let mut xhat = vec![0.0f64; data.len()];
    let mut out = vec![0.0f64; data.len()];

    for b in 0..b_n {
        for c in 0..c_n {
            let r = pattern.region_of(b, c, c_n);
            let mu = mean[r];
            let istd = inv_std[r];
            let (g, bt) = match affine {
                Some(a) => (a.gamma[c], a.beta[c]),
                None => (1.0, 0.0),
            };
            let start = (b * c_n + c) * plane;
            for i in start..start + plane {
                let z = (data[i] - mu) * istd;
                xhat[i] = z;
                out[i] = g * z + bt;
            }
        }
    }

    Ok((
        FeatureMap::new(shape, out)?,
        ZNormCache {
            pattern,
            shape,
            xhat,
            inv_std,
        },
    ))
}

/// Per-channel `(d_gamma, d_beta)` pair.
pub type AffineGrads = (Vec<f64>, Vec<f64>);

/// Exact backward through standardization with batch-computed moments,
/// i.e. including the dependence of `mu` and `var` on the inputs.
///
/// Returns the input gradient and, when an affine transform was applied,
/// the per-channel `(d_gamma, d_beta)`.
pub fn znorm_backward(
    grad_out: &FeatureMap,
    cache: &ZNormCache,
    affine: Option<&AffineParams>,
) -> Result<(FeatureMap, Option<AffineGrads>)> {
    if grad_out.shape() != cache.shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", cache.shape),
            got: format!("{:?}", grad_out.shape()),
        });
    }
    let shape = cache.shape;
    let [b_n, c_n, _, _] = shape;
    let plane = shape[2] * shape[3];
    let pattern = cache.pattern;
    let regions = pattern.region_count(shape);
    let n = pattern.region_len(shape) as f64;
    let g = grad_out.data();
    let xhat = &cache.xhat;

    let mut d_gamma = vec![0.0f64; c_n];
    let mut d_beta = vec![0.0f64; c_n];
    // region sums of dxhat and dxhat * xhat
    let mut s1 = vec![0.0f64; regions];
    let mut s2 = vec![0.0f64; regions];

    for b in 0..b_n {
        for c in 0..c_n {
            let r = pattern.region_of(b, c, c_n);
            let gamma = affine.map_or(1.0, |a| a.gamma[c]);
            let start = (b * c_n + c) * plane;
            let mut sg = 0.0;
            let mut sgx = 0.0;
            let mut s1_acc = 0.0;
            let mut s2_acc = 0.0;
            for i in start..start + plane {
                let gi = g[i];
                let xi = xhat[i];
                sg += gi;
                sgx += gi * xi;
                let dxh = gi * gamma;
                s1_acc += dxh;
                s2_acc += dxh * xi;
            }
            d_beta[c] += sg;
            d_gamma[c] += sgx;
            s1[r] += s1_acc;
            s2[r] += s2_acc;
        }
    }

    let mut dx = vec![0.0f64; g.len()];
    for b in 0..b_n {
        for c in 0..c_n {
            let r = pattern.region_of(b, c, c_n);
            let gamma = affine.map_or(1.0, |a| a.gamma[c]);
            let istd = cache.inv_std[r];
            let mean_s1 = s1[r] / n;
            let mean_s2 = s2[r] / n;
            let start = (b * c_n + c) * plane;
            for i in start..start + plane {
                let dxh = g[i] * gamma;
                dx[i] = istd * (dxh - mean_s1 - xhat[i] * mean_s2);
            }
        }
    }

    let grads = affine.map(|_| (d_gamma, d_beta));
    Ok((FeatureMap::new(shape, dx)?, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_channel_moments_match_direct_sums() {
        // 2 samples, 1 channel, 1x2 spatial: {1,2},{3,4}
        let x = FeatureMap::new([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (m, v) = region_moments(&x, Pattern::PerChannel).unwrap();
        assert!((m[0] - 2.5).abs() < 1e-12);
        assert!((v[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn group_pattern_requires_divisible_channels() {
        let x = FeatureMap::filled([1, 6, 1, 1], 0.0);
        assert!(region_moments(&x, Pattern::PerSampleGroup { groups: 4 }).is_err());
        assert!(region_moments(&x, Pattern::PerSampleGroup { groups: 3 }).is_ok());
    }

    #[test]
    fn standardized_region_has_zero_mean_unit_var() {
        let x = FeatureMap::new([2, 2, 1, 1], vec![0.3, -1.0, 2.0, 0.7]).unwrap();
        let (m, v) = region_moments(&x, Pattern::PerChannel).unwrap();
        let (y, _) = znorm_forward(&x, Pattern::PerChannel, &m, &v, None, 0.0).unwrap();
        let (m2, v2) = region_moments(&y, Pattern::PerChannel).unwrap();
        for c in 0..2 {
            assert!(m2[c].abs() < 1e-12);
            assert!((v2[c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn znorm_matches_hand_computed_values() {
        let x = FeatureMap::new([4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = znorm_forward(&x, Pattern::PerChannel, &[2.5], &[1.25], None, 0.0).unwrap();
        let want = [
            -1.3416407864998738,
            -0.4472135954999579,
            0.4472135954999579,
            1.3416407864998738,
        ];
        for (got, want) in y.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_count_mismatch_is_an_error() {
        let x = FeatureMap::filled([1, 2, 1, 1], 0.0);
        let r = znorm_forward(&x, Pattern::PerChannel, &[0.0], &[1.0], None, 1e-5);
        assert!(r.is_err());
    }
}
