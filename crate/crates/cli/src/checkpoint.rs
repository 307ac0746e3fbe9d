//! Parameter checkpoints: a flat, ordered, named list of real arrays
//! (weights, affine pairs, blend logits) plus running statistics.

use anyhow::{bail, Context, Result};
use cnorm::LayerStack;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    len: usize,
    values: Vec<f64>,
}

pub fn save_checkpoint(stack: &LayerStack, path: &Path) -> Result<()> {
    let entries: Vec<Entry> = stack
        .state_arrays()
        .into_iter()
        .map(|(name, values)| Entry {
            name,
            len: values.len(),
            values,
        })
        .collect();
    let json = serde_json::to_string(&entries)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(stack: &mut LayerStack, path: &Path) -> Result<()> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries: Vec<Entry> = serde_json::from_str(&text)?;
    for e in &entries {
        if e.values.len() != e.len {
            bail!(
                "checkpoint entry `{}`: length field {} != {} values",
                e.name,
                e.len,
                e.values.len()
            );
        }
    }
    let arrays: Vec<(String, Vec<f64>)> = entries.into_iter().map(|e| (e.name, e.values)).collect();
    stack.load_state_arrays(&arrays)?;
    Ok(())
}
