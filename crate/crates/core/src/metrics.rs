//! Continual-learning evaluation metrics over the lower-triangular
//! accuracy matrix: average accuracy, forgetting measure, learning accuracy.

use crate::error::{Error, Result};

/// Lower-triangular accuracy matrix: `row(i)[j]` is the accuracy on task
/// `j`'s test set after finishing task `i` (0-based, `j <= i`).
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Appends the row recorded after one more task; row `i` must contain
    /// `i + 1` entries, all in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries", self.rows.len() + 1),
                got: format!("{}", row.len()),
            });
        }
        if row.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidConfig("accuracy outside [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, after_task: usize, eval_task: usize) -> Option<f64> {
        self.rows
            .get(after_task)
            .and_then(|r| r.get(eval_task))
            .copied()
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Average accuracy: mean of the final row.
pub fn acc(m: &AccuracyMatrix) -> f64 {
    let t = m.tasks();
    assert!(t >= 1, "accuracy matrix is empty");
    let last = &m.rows[t - 1];
    last.iter().sum::<f64>() / t as f64
}

/// Forgetting measure: mean over old tasks of the peak-minus-final
/// accuracy. Undefined (None) for a single task.
pub fn fm(m: &AccuracyMatrix) -> Option<f64> {
    let t = m.tasks();
    if t < 2 {
        return None;
    }
    let last = &m.rows[t - 1];
    let mut total = 0.0;
    for j in 0..t - 1 {
        let peak = (j..t - 1)
            .map(|l| m.rows[l][j])
            .fold(f64::NEG_INFINITY, f64::max);
        total += peak - last[j];
    }
    Some(total / (t - 1) as f64)
}

/// Learning accuracy: mean of the diagonal.
pub fn la(m: &AccuracyMatrix) -> f64 {
    let t = m.tasks();
    assert!(t >= 1, "accuracy matrix is empty");
    (0..t).map(|i| m.rows[i][i]).sum::<f64>() / t as f64
}

/// Mean and sample standard deviation (n-1 denominator; 0 when n < 2).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n >= 1, "no values");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}
