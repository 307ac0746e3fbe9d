//! Task streams: pixel-permuted variants of a base dataset, or class-split
//! partitions of it.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Permuted,
    Split,
}

#[derive(Debug, Clone)]
pub struct Task {
    /// 1-based task identifier.
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }
}

fn permute_images(ds: &Dataset, indices: &[usize], perm: Option<&[usize]>) -> Dataset {
    let p = ds.pixels();
    let mut images = Vec::with_capacity(indices.len() * p);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = ds.image(i);
        match perm {
            Some(perm) => images.extend(perm.iter().map(|&j| img[j])),
            None => images.extend_from_slice(img),
        }
        labels.push(ds.labels[i]);
    }
    Dataset::new(images, labels, ds.rows, ds.cols).expect("consistent dataset")
}

/// Builds a permuted stream: task `i` applies one fixed pixel permutation
/// to a fresh subset of the training data and to the full test set.
/// When `permute_first` is false the first task keeps the original pixel
/// order.
pub fn build_pmnist_stream(
    base_train: &Dataset,
    base_test: &Dataset,
    n_tasks: usize,
    train_per_task: usize,
    permute_first: bool,
    rng: &SeededRng,
) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::EmptyTask);
    }
    if train_per_task == 0 || base_train.is_empty() || base_test.is_empty() {
        return Err(Error::EmptyTask);
    }
    if train_per_task > base_train.len() {
        return Err(Error::InsufficientData {
            needed: train_per_task,
            have: base_train.len(),
        });
    }

    let all_test: Vec<usize> = (0..base_test.len()).collect();
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let perm = if t == 0 && !permute_first {
            None
        } else {
            let mut perm_rng = rng.substream_indexed("permutation", t as u64);
            Some(perm_rng.permutation(base_train.pixels())?)
        };
        let mut subset_rng = rng.substream_indexed("subset", t as u64);
        let train_idx = subset_rng.sample_indices(base_train.len(), train_per_task);
        tasks.push(Task {
            id: t + 1,
            train: permute_images(base_train, &train_idx, perm.as_deref()),
            test: permute_images(base_test, &all_test, perm.as_deref()),
        });
    }
    Ok(TaskStream {
        kind: StreamKind::Permuted,
        tasks,
    })
}

/// Builds a split stream: task `i` holds the examples whose labels fall in
/// its `classes_per_task` consecutive classes. Labels stay global
/// (single-head).
pub fn build_split_stream(
    base_train: &Dataset,
    base_test: &Dataset,
    n_tasks: usize,
    classes_per_task: usize,
    train_per_task: Option<usize>,
    rng: &SeededRng,
) -> Result<TaskStream> {
    if n_tasks == 0 || classes_per_task == 0 {
        return Err(Error::EmptyTask);
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let lo = (t * classes_per_task) as u8;
        let hi = ((t + 1) * classes_per_task) as u8;
        let in_task = |l: u8| l >= lo && l < hi;
        let mut train_idx: Vec<usize> = (0..base_train.len())
            .filter(|&i| in_task(base_train.labels[i]))
            .collect();
        let test_idx: Vec<usize> = (0..base_test.len())
            .filter(|&i| in_task(base_test.labels[i]))
            .collect();
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(Error::InsufficientData { needed: 1, have: 0 });
        }
        if let Some(limit) = train_per_task {
            if limit < train_idx.len() {
                let mut subset_rng = rng.substream_indexed("subset", t as u64);
                let keep = subset_rng.sample_indices(train_idx.len(), limit);
                train_idx = keep.into_iter().map(|k| train_idx[k]).collect();
            }
        }
        tasks.push(Task {
            id: t + 1,
            train: permute_images(base_train, &train_idx, None),
            test: permute_images(base_test, &test_idx, None),
        });
    }
    Ok(TaskStream {
        kind: StreamKind::Split,
        tasks,
    })
}
