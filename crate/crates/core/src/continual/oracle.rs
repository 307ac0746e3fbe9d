//! The recalibration oracle: replaces each batch-dependent layer's running
//! moments with exact dataset moments computed with the final parameters,
//! and the drift measurement against it.

use crate::continual::{make_batch, InputLayout};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Layer, LayerStack};
use crate::norm::Mode;

/// Streaming per-channel mean/variance accumulator (Welford), pooling the
/// batch and spatial axes.
#[derive(Debug, Clone)]
struct ChannelWelford {
    counts: Vec<u64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelWelford {
    fn new(channels: usize) -> Self {
        Self {
            counts: vec![0; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    fn push(&mut self, x: &crate::tensor::FeatureMap) {
        let [b_n, c_n, _, _] = x.shape();
        debug_assert_eq!(c_n, self.mean.len());
        for b in 0..b_n {
            for c in 0..c_n {
                let mut n = self.counts[c];
                let mut mean = self.mean[c];
                let mut m2 = self.m2[c];
                for &v in x.plane(b, c) {
                    n += 1;
                    let delta = v - mean;
                    mean += delta / n as f64;
                    m2 += delta * (v - mean);
                }
                self.counts[c] = n;
                self.mean[c] = mean;
                self.m2[c] = m2;
            }
        }
    }

    /// Population moments.
    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let var = self
            .m2
            .iter()
            .zip(&self.counts)
            .map(|(&m, &n)| if n > 0 { m / n as f64 } else { 0.0 })
            .collect();
        (self.mean, var)
    }
}

/// Recomputes every batch-dependent layer's running statistics as exact
/// population moments of its statistic source over `datasets`, layer by
/// layer in network order (earlier layers already recalibrated when a later
/// layer's activations are gathered). Parameters are untouched.
///
/// Returns the recalibrated clone and whether any layer was recalibrated.
pub fn bn_star_recalibrate(
    stack: &LayerStack,
    datasets: &[&Dataset],
    layout: InputLayout,
    batch: usize,
) -> Result<(LayerStack, bool)> {
    let mut star = stack.clone();
    star.set_mode(Mode::Eval);
    let targets = star.batch_dependent_layers();
    if targets.is_empty() {
        return Ok((star, false));
    }
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyTask);
    }

    for &li in &targets {
        let channels = match &star.layers()[li] {
            Layer::Norm(n) => n.channels(),
            _ => unreachable!("batch_dependent_layers returns norm layers"),
        };
        let mut acc = ChannelWelford::new(channels);
        for ds in datasets {
            let n = ds.len();
            let mut start = 0;
            while start < n {
                let end = (start + batch).min(n);
                let idx: Vec<usize> = (start..end).collect();
                let x = make_batch(ds, &idx, layout)?;
                let prefix = star.eval_forward_prefix(&x, li)?;
                let src = match &star.layers()[li] {
                    Layer::Norm(norm) => norm.stat_source(&prefix)?,
                    _ => unreachable!(),
                };
                acc.push(&src);
                start = end;
            }
        }
        let (mean, var) = acc.finish();
        match &mut star.layers_mut()[li] {
            Layer::Norm(norm) => norm.set_running_moments(mean, var)?,
            _ => unreachable!(),
        }
    }
    Ok((star, true))
}

/// L1 drift of one batch-dependent layer's running moments against the
/// oracle's, summed over channels.
#[derive(Debug, Clone)]
pub struct LayerDrift {
    /// 1-based index among the stack's batch-dependent layers.
    pub layer: usize,
    pub d_mu: f64,
    pub d_var: f64,
}

/// Drift of every batch-dependent layer, recorded after `after_task` tasks.
#[derive(Debug, Clone)]
pub struct DriftRecord {
    pub after_task: usize,
    pub layers: Vec<LayerDrift>,
}

/// Compares running moments layer-by-layer between two structurally
/// identical stacks.
pub fn measure_drift(stack: &LayerStack, oracle: &LayerStack) -> Result<Vec<LayerDrift>> {
    let a = stack.batch_dependent_layers();
    let b = oracle.batch_dependent_layers();
    if a != b {
        return Err(Error::StructuralMismatch(
            "different batch-dependent layer positions".into(),
        ));
    }
    let mut out = Vec::with_capacity(a.len());
    for (k, &li) in a.iter().enumerate() {
        let (sa, sb) = match (&stack.layers()[li], &oracle.layers()[li]) {
            (Layer::Norm(x), Layer::Norm(y)) => (
                x.running.as_ref().expect("batch-dependent layer has stats"),
                y.running.as_ref().expect("batch-dependent layer has stats"),
            ),
            _ => unreachable!(),
        };
        if sa.mu.len() != sb.mu.len() {
            return Err(Error::StructuralMismatch(format!(
                "layer {li}: {} vs {} channels",
                sa.mu.len(),
                sb.mu.len()
            )));
        }
        let d_mu = sa.mu.iter().zip(&sb.mu).map(|(x, y)| (x - y).abs()).sum();
        let d_var = sa.var.iter().zip(&sb.var).map(|(x, y)| (x - y).abs()).sum();
        out.push(LayerDrift {
            layer: k + 1,
            d_mu,
            d_var,
        });
    }
    Ok(out)
}
