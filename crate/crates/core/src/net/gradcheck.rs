//! Central finite-difference verification of the backward pass.
//!
//! Every parameter element and every input element is perturbed by `±h`
//! and the cross-entropy loss difference is compared against the analytic
//! gradient. Batch-renorm correction vectors are pinned first so they act
//! as the constants the backward pass treats them as.

use crate::error::Result;
use crate::net::{cross_entropy_loss, LayerStack};
use crate::norm::Mode;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub input_max_rel_err: f64,
    /// Smallest `|pre-activation|` at any ReLU during the nominal forward;
    /// finite differences are only trustworthy with a margin above `h`.
    pub min_relu_margin: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(self.input_max_rel_err, f64::max)
    }
}

/// Relative error with an absolute floor, so vanishing gradients compare
/// on an absolute scale (the finite-difference noise floor is ~1e-10).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

fn loss_of(stack: &mut LayerStack, x: &FeatureMap, labels: &[usize]) -> Result<f64> {
    let logits = stack.forward(x)?;
    let (loss, _) = cross_entropy_loss(&logits, labels)?;
    Ok(loss)
}

fn add_to_param(stack: &mut LayerStack, slot: usize, elem: usize, delta: f64) {
    let mut i = 0;
    stack.visit_params_mut(|_, p, _| {
        if i == slot {
            p[elem] += delta;
        }
        i += 1;
    });
}

/// Compares the backward pass against central finite differences with
/// step `h` on every parameter and input element. The caller's stack is
/// left untouched.
pub fn grad_check(
    stack: &LayerStack,
    x: &FeatureMap,
    labels: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let mut work = stack.clone();
    work.set_mode(Mode::Train);

    // Populate renorm corrections, then pin them.
    work.forward(x)?;
    work.freeze_renorm();

    work.zero_grads();
    let logits = work.forward(x)?;
    let min_relu_margin = work.min_relu_margin();
    let (_, grad_logits) = cross_entropy_loss(&logits, labels)?;
    let grad_input = work.backward(&grad_logits)?;

    let mut names = Vec::new();
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    work.visit_params_mut(|name, _, g| {
        names.push(name.to_string());
        analytic.push(g.to_vec());
    });

    let mut scratch = work.clone();
    let mut entries = Vec::with_capacity(names.len());
    for (slot, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for elem in 0..analytic[slot].len() {
            add_to_param(&mut scratch, slot, elem, h);
            let lp = loss_of(&mut scratch, x, labels)?;
            add_to_param(&mut scratch, slot, elem, -2.0 * h);
            let lm = loss_of(&mut scratch, x, labels)?;
            add_to_param(&mut scratch, slot, elem, h);
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[slot][elem], numeric));
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: worst,
        });
    }

    let mut input_worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let lp = loss_of(&mut scratch, &xp, labels)?;
        xp.data_mut()[i] = orig - h;
        let lm = loss_of(&mut scratch, &xp, labels)?;
        xp.data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        input_worst = input_worst.max(rel_err(grad_input.data()[i], numeric));
    }

    Ok(GradCheckReport {
        entries,
        input_max_rel_err: input_worst,
        min_relu_margin,
    })
}
