//! Merging bit-identical rows so per-sample sums can be evaluated once per
//! distinct (input, action). Every quantity the agent differentiates is a
//! coefficient-weighted sum over samples of a function of the row, so
//! summing coefficients of identical rows is exact.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

use crate::diffnet::ActionBatch;

/// Distinct rows of a matrix (optionally keyed together with an action).
pub(crate) struct Compacted {
    /// Index of the first occurrence of each distinct row.
    pub representatives: Vec<usize>,
    /// For each original row, the index of its distinct row.
    pub index: Vec<usize>,
}

fn action_key(actions: &ActionBatch, i: usize, key: &mut Vec<u64>) {
    match actions {
        ActionBatch::Discrete(a) => key.push(a[i] as u64),
        ActionBatch::Continuous(a) => key.extend(a.row(i).iter().map(|v| v.to_bits())),
    }
}

pub(crate) fn compact(inputs: ArrayView2<f64>, actions: Option<&ActionBatch>) -> Compacted {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(inputs.nrows() / 4);
    let mut representatives = Vec::new();
    let mut index = Vec::with_capacity(inputs.nrows());
    for (i, row) in inputs.rows().into_iter().enumerate() {
        let mut key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        if let Some(a) = actions {
            action_key(a, i, &mut key);
        }
        let next = representatives.len();
        let u = *seen.entry(key).or_insert(next);
        if u == next {
            representatives.push(i);
        }
        index.push(u);
    }
    Compacted { representatives, index }
}

impl Compacted {
    pub fn len(&self) -> usize {
        self.representatives.len()
    }

    pub fn rows(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        inputs.select(ndarray::Axis(0), &self.representatives)
    }

    pub fn actions(&self, actions: &ActionBatch) -> ActionBatch {
        match actions {
            ActionBatch::Discrete(a) => ActionBatch::Discrete(self.representatives.iter().map(|&i| a[i]).collect()),
            ActionBatch::Continuous(a) => ActionBatch::Continuous(a.select(ndarray::Axis(0), &self.representatives)),
        }
    }

    /// Sums per-row values into their distinct rows.
    pub fn sum(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (&u, v) in self.index.iter().zip(values) {
            out[u] += v;
        }
        out
    }

    /// Expands per-distinct-row values back to every original row.
    pub fn scatter(&self, values: &[f64]) -> Vec<f64> {
        self.index.iter().map(|&u| values[u]).collect()
    }
}
