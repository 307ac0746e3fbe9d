//! Online continual learning: task streams visited once in order, episodic
//! memory, the Single / experience-replay / dark-replay strategies, per-task
//! evaluation, and the recalibration oracle with drift tracking.

mod memory;
mod oracle;
mod stream;

pub use memory::{EpisodicMemory, MemoryItem, MemoryPolicy};
pub use oracle::{bn_star_recalibrate, measure_drift, DriftRecord, LayerDrift};
pub use stream::{build_pmnist_stream, build_split_stream, StreamKind, Task, TaskStream};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::net::{cross_entropy_loss, mse_logits_loss, sgd_step, LayerStack, SgdConfig};
use crate::rng::SeededRng;
use crate::tensor::FeatureMap;

/// Training strategy for the online stream.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Plain single-epoch training on the stream, no memory.
    Single,
    /// Experience replay: one cross-entropy over the union of the incoming
    /// batch and a sampled memory batch.
    Er { replay_batch: usize },
    /// Dark experience replay++: incoming cross-entropy plus `alpha` times
    /// a mean-squared match of current logits to stored logits on one
    /// memory sample and `beta` times a replayed cross-entropy on another.
    DerPlusPlus {
        replay_batch: usize,
        alpha: f64,
        beta: f64,
    },
}

impl Strategy {
    pub fn needs_memory(&self) -> bool {
        !matches!(self, Strategy::Single)
    }

    fn stores_logits(&self) -> bool {
        matches!(self, Strategy::DerPlusPlus { .. })
    }
}

/// How images map onto feature tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLayout {
    /// `(B, rows*cols, 1, 1)` for MLPs.
    Flat,
    /// `(B, 1, rows, cols)` for CNNs.
    Spatial,
}

pub(crate) fn make_batch(
    ds: &Dataset,
    indices: &[usize],
    layout: InputLayout,
) -> Result<FeatureMap> {
    match layout {
        InputLayout::Flat => ds.batch_flat(indices),
        InputLayout::Spatial => ds.batch_spatial(indices),
    }
}

/// Assembles stored items into a batch with the same per-sample shape as
/// `reference`.
fn items_batch(items: &[&MemoryItem], reference: &FeatureMap) -> Result<(FeatureMap, Vec<usize>)> {
    let [_, c, h, w] = reference.shape();
    let per = c * h * w;
    let mut data = Vec::with_capacity(items.len() * per);
    let mut labels = Vec::with_capacity(items.len());
    for it in items {
        if it.x.len() != per {
            return Err(Error::ShapeMismatch {
                expected: format!("{per} pixels per stored item"),
                got: format!("{}", it.x.len()),
            });
        }
        data.extend(it.x.iter().map(|&v| v as f64));
        labels.push(it.y as usize);
    }
    Ok((FeatureMap::new([items.len(), c, h, w], data)?, labels))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Recalibrate after each task and record the oracle's accuracy matrix.
    pub bn_star: bool,
    /// Record moment drift against the oracle after each task.
    pub drift_tracking: bool,
    pub eval_batch: usize,
    pub layout: InputLayout,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            bn_star: false,
            drift_tracking: false,
            eval_batch: 256,
            layout: InputLayout::Flat,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub matrix: AccuracyMatrix,
    /// Accuracy matrix of the recalibrated oracle, when requested and the
    /// stack has batch-dependent layers.
    pub star_matrix: Option<AccuracyMatrix>,
    pub drift: Vec<DriftRecord>,
    /// Stream samples consumed (each exactly once; replays excluded).
    pub stream_samples: u64,
    pub warnings: Vec<String>,
}

/// Top-1 accuracy of the stack on a dataset, evaluated purely.
pub fn evaluate(
    stack: &LayerStack,
    ds: &Dataset,
    layout: InputLayout,
    batch: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyTask);
    }
    let mut correct = 0usize;
    let n = ds.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = make_batch(ds, &idx, layout)?;
        let logits = stack.eval_forward(&x)?;
        let [b_n, y_n, _, _] = logits.shape();
        let z = logits.data();
        for b in 0..b_n {
            let row = &z[b * y_n..(b + 1) * y_n];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("nonempty row");
            if pred == ds.labels[idx[b]] as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Trains the stack over the stream, one epoch, tasks in order. After each
/// task the accuracy row over all seen tasks is recorded; optionally the
/// oracle matrix and the drift records too.
pub fn train_online(
    stream: &TaskStream,
    stack: &mut LayerStack,
    strategy: &Strategy,
    memory: &mut EpisodicMemory,
    sgd: &SgdConfig,
    rng: &SeededRng,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if stream.tasks.is_empty() || stream.tasks.iter().any(|t| t.train.is_empty()) {
        return Err(Error::EmptyTask);
    }
    if strategy.needs_memory() && memory.capacity() == 0 {
        return Err(Error::NoMemory);
    }

    let mut replay_rng = rng.substream("replay");
    let mut memory_rng = rng.substream("reservoir");
    let mut outcome = TrainOutcome {
        matrix: AccuracyMatrix::new(),
        star_matrix: opts.bn_star.then(AccuracyMatrix::new),
        drift: Vec::new(),
        stream_samples: 0,
        warnings: Vec::new(),
    };
    let needs_oracle = opts.bn_star || opts.drift_tracking;
    let mut oracle_possible = !stack.batch_dependent_layers().is_empty();
    if needs_oracle && !oracle_possible {
        outcome.warnings.push(
            "recalibration requested but the stack has no batch-dependent layers; \
             oracle rows and drift records are absent"
                .into(),
        );
        outcome.star_matrix = None;
    }
    oracle_possible &= needs_oracle;

    for (ti, task) in stream.tasks.iter().enumerate() {
        let mut shuffle_rng = rng.substream_indexed("shuffle", ti as u64);
        let order = shuffle_rng.permutation(task.train.len())?;

        stack.set_mode(crate::norm::Mode::Train);
        for chunk in order.chunks(sgd.batch_size) {
            let x = make_batch(&task.train, chunk, opts.layout)?;
            let labels = task.train.labels_at(chunk);
            let stored_logits =
                train_step(stack, strategy, memory, sgd, &mut replay_rng, &x, &labels)?;
            outcome.stream_samples += chunk.len() as u64;

            if strategy.needs_memory() {
                for (k, &i) in chunk.iter().enumerate() {
                    let logits = if strategy.stores_logits() {
                        let row = stored_logits
                            .as_ref()
                            .expect("train step returns logits when stored");
                        let y_n = row.len() / chunk.len();
                        Some(row[k * y_n..(k + 1) * y_n].to_vec())
                    } else {
                        None
                    };
                    let item = MemoryItem {
                        x: task.train.image(i).to_vec(),
                        y: task.train.labels[i],
                        task_id: task.id,
                        logits,
                    };
                    memory.insert(item, &mut memory_rng);
                }
            }
        }

        // accuracy over every task seen so far
        let mut row = Vec::with_capacity(ti + 1);
        for seen in &stream.tasks[..=ti] {
            row.push(evaluate(stack, &seen.test, opts.layout, opts.eval_batch)?);
        }
        outcome.matrix.push_row(row)?;

        if oracle_possible {
            let seen_train: Vec<&Dataset> = stream.tasks[..=ti].iter().map(|t| &t.train).collect();
            let (star, did) =
                bn_star_recalibrate(stack, &seen_train, opts.layout, opts.eval_batch)?;
            debug_assert!(did);
            if let Some(sm) = &mut outcome.star_matrix {
                let mut row = Vec::with_capacity(ti + 1);
                for seen in &stream.tasks[..=ti] {
                    row.push(evaluate(&star, &seen.test, opts.layout, opts.eval_batch)?);
                }
                sm.push_row(row)?;
            }
            if opts.drift_tracking {
                outcome.drift.push(DriftRecord {
                    after_task: ti + 1,
                    layers: measure_drift(stack, &star)?,
                });
            }
        }
    }

    Ok(outcome)
}

/// One optimization step under the strategy. Returns the logits computed on
/// the incoming batch when the strategy stores them at insertion time.
#[allow(clippy::too_many_arguments)]
fn train_step(
    stack: &mut LayerStack,
    strategy: &Strategy,
    memory: &EpisodicMemory,
    sgd: &SgdConfig,
    replay_rng: &mut SeededRng,
    x: &FeatureMap,
    labels: &[usize],
) -> Result<Option<Vec<f64>>> {
    stack.zero_grads();
    match strategy {
        Strategy::Single => {
            let logits = stack.forward(x)?;
            let (_, grad) = cross_entropy_loss(&logits, labels)?;
            stack.backward(&grad)?;
            sgd_step(stack, sgd);
            Ok(None)
        }
        Strategy::Er { replay_batch } => {
            if memory.is_empty() {
                let logits = stack.forward(x)?;
                let (_, grad) = cross_entropy_loss(&logits, labels)?;
                stack.backward(&grad)?;
            } else {
                let picked = memory.sample(*replay_batch, replay_rng);
                let (mx, mlabels) = items_batch(&picked, x)?;
                let joint = FeatureMap::concat_batch(&[x, &mx])?;
                let mut joint_labels = labels.to_vec();
                joint_labels.extend(mlabels);
                let logits = stack.forward(&joint)?;
                let (_, grad) = cross_entropy_loss(&logits, &joint_labels)?;
                stack.backward(&grad)?;
            }
            sgd_step(stack, sgd);
            Ok(None)
        }
        Strategy::DerPlusPlus {
            replay_batch,
            alpha,
            beta,
        } => {
            let logits = stack.forward(x)?;
            let stored = logits.data().to_vec();
            let (_, grad) = cross_entropy_loss(&logits, labels)?;
            stack.backward(&grad)?;

            if !memory.is_empty() {
                // soft-label matching on one memory sample
                let picked = memory.sample(*replay_batch, replay_rng);
                if !picked.is_empty() {
                    let (mx, _) = items_batch(&picked, x)?;
                    let target: Vec<f64> = picked
                        .iter()
                        .flat_map(|it| it.logits.clone().expect("dark replay items carry logits"))
                        .collect();
                    let mlogits = stack.forward(&mx)?;
                    let (_, mut mgrad) = mse_logits_loss(&mlogits, &target)?;
                    mgrad.data_mut().iter_mut().for_each(|g| *g *= alpha);
                    stack.backward(&mgrad)?;
                }
                // replayed cross-entropy on a second, independent sample
                let picked2 = memory.sample(*replay_batch, replay_rng);
                if !picked2.is_empty() {
                    let (mx2, my2) = items_batch(&picked2, x)?;
                    let logits2 = stack.forward(&mx2)?;
                    let (_, mut grad2) = cross_entropy_loss(&logits2, &my2)?;
                    grad2.data_mut().iter_mut().for_each(|g| *g *= beta);
                    stack.backward(&grad2)?;
                }
            }
            sgd_step(stack, sgd);
            Ok(Some(stored))
        }
    }
}
