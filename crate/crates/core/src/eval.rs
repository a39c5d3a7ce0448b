//! Accuracy and confusion counts over a rendered dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{candidate_logits, forward, sum_head_scores, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};
use crate::synthdata::{Example, View};
use crate::training::Prepared;

/// How candidate scores are read off the last-layer `<1>` states.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    /// The model's own linear head.
    OwnHead,
    /// Sum of the state components.
    SumHead,
    /// An external linear head `(weight [d], bias [1])`.
    Head(&'a Tensor, &'a Tensor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n_examples: usize,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub view: View,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Tallies predictions against gold labels.
pub fn tally(predictions: &[usize], labels: &[usize], n_candidates: usize, view: View) -> Result<EvalResult> {
    if predictions.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::contract("prediction and label counts differ"));
    }
    let mut confusion = vec![vec![0usize; n_candidates]; n_candidates];
    let mut correct = 0;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n_candidates || y >= n_candidates {
            return Err(Error::contract(format!("label {y} or prediction {p} out of range")));
        }
        confusion[y][p] += 1;
        correct += usize::from(p == y);
    }
    Ok(EvalResult {
        accuracy: correct as f64 / predictions.len() as f64,
        n_examples: predictions.len(),
        confusion,
        view,
    })
}

pub fn scores(params: &ModelParams, data: &Prepared, i: usize, scorer: Scorer<'_>) -> Result<Vec<f64>> {
    let x = &data.inputs[i];
    let trace = forward(params, &x.token_ids, &x.mask, &x.layout).map_err(|e| match e {
        Error::Input(reason) | Error::Contract(reason) => Error::Render {
            id: data.ids[i],
            reason,
        },
        other => other,
    })?;
    Ok(match scorer {
        Scorer::OwnHead => candidate_logits(&trace, params).into_data(),
        Scorer::SumHead => sum_head_scores(&trace).into_data(),
        Scorer::Head(w, b) => {
            let last = trace.last();
            trace
                .layout
                .candidate_marks
                .iter()
                .map(|&p| kernels::dot(w.data(), last.row(p)) + b.data()[0])
                .collect()
        }
    })
}

pub fn evaluate_prepared(params: &ModelParams, data: &Prepared, scorer: Scorer<'_>) -> Result<EvalResult> {
    if let Scorer::Head(w, b) = scorer {
        if w.shape() != [params.config.d_model] || b.numel() != 1 {
            return Err(Error::contract("external head must be [d_model] weight and scalar bias"));
        }
    }
    let predictions = (0..data.len())
        .into_par_iter()
        .map(|i| scores(params, data, i, scorer).map(|s| argmax(&s)))
        .collect::<Result<Vec<_>>>()?;
    tally(&predictions, &data.labels, params.config.n_candidates, data.view)
}

/// Renders `dataset` in `view` and scores it with the model's own head.
pub fn evaluate(params: &ModelParams, dataset: &[Example], view: View) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let data = Prepared::new(dataset, view, &params.config)?;
    evaluate_prepared(params, &data, Scorer::OwnHead)
}
