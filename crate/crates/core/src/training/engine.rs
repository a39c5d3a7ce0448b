use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::optim::{AdamW, OptimizerConfig};
use super::StageLog;
use crate::encoder::{forward_taped, EncoderConfig, ModelParams, ParamVars, TapedTrace};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::rng;
use crate::synthdata::{render_input, Example, RenderedInput, View};

/// A dataset rendered once for one view.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub view: View,
    pub ids: Vec<u64>,
    pub inputs: Vec<RenderedInput>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn new(examples: &[Example], view: View, config: &EncoderConfig) -> Result<Self> {
        let inputs = examples
            .iter()
            .map(|e| render_input(e, view, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            view,
            ids: examples.iter().map(|e| e.id).collect(),
            inputs,
            labels: examples.iter().map(|e| e.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Runs the encoder on a fresh tape for example `i` of `data`.
pub(crate) fn taped_forward(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &EncoderConfig,
    data: &Prepared,
    i: usize,
) -> Result<TapedTrace> {
    let x = &data.inputs[i];
    forward_taped(tape, vars, config, &x.token_ids, &x.mask, &x.layout)
}

/// Trainable mask over the canonical tensors with the answer head frozen.
pub(crate) fn encoder_only(params: &ModelParams) -> Vec<bool> {
    let n = params.tensors().len();
    (0..n).map(|i| i + crate::encoder::HEAD_TENSORS.len() < n).collect()
}

pub(crate) fn all_trainable(params: &ModelParams) -> Vec<bool> {
    vec![true; params.tensors().len()]
}

/// Example order for one epoch, derived from `(seed, epoch)` alone.
pub(crate) fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(rng::derive(seed, epoch as u64)));
    order
}

pub(crate) struct LoopSpec<'a> {
    pub name: &'a str,
    pub epochs: usize,
    pub lr: &'a dyn Fn(usize) -> Result<f64>,
    pub opt: &'a OptimizerConfig,
    pub shuffle_seed: u64,
    pub trainable: Vec<bool>,
}

/// Per-example loss builder: records the loss for example `i` on `tape`.
pub(crate) type LossFn<'a> = dyn Fn(&mut Tape, &ParamVars, usize) -> Result<Var> + Sync + 'a;

/// Loss value and per-tensor gradients for one example.
fn example_grad(
    params: &ModelParams,
    trainable: &[bool],
    loss: &LossFn<'_>,
    i: usize,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, Some(trainable));
    let root = loss(&mut tape, &vars, i)?;
    let value = tape.value(root).item().ok_or_else(|| Error::contract("loss must be a scalar"))?;
    tape.backward(root)?;
    let grads = vars
        .all
        .iter()
        .zip(trainable)
        .map(|(&v, &t)| if t { tape.grad(v).map(<[f64]>::to_vec) } else { None })
        .collect();
    Ok((value, grads))
}

/// Mean loss and mean gradient over `batch`, reduced in batch order so the
/// result does not depend on thread scheduling.
pub(crate) fn batch_grad(
    params: &ModelParams,
    trainable: &[bool],
    loss: &LossFn<'_>,
    batch: &[usize],
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let per_example = batch
        .par_iter()
        .map(|&i| example_grad(params, trainable, loss, i))
        .collect::<Result<Vec<_>>>()?;
    let mut total: Vec<Option<Vec<f64>>> = params
        .tensors()
        .iter()
        .zip(trainable)
        .map(|(t, &on)| on.then(|| vec![0.0; t.numel()]))
        .collect();
    let mut loss_sum = 0.0;
    for (value, grads) in per_example {
        loss_sum += value;
        for (acc, g) in total.iter_mut().zip(grads) {
            if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                crate::numerics::kernels::add_into(acc, &g);
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in total.iter_mut().flatten() {
        g.iter_mut().for_each(|x| *x *= scale);
    }
    Ok((loss_sum * scale, total))
}

/// Mini-batch AdamW over `n` examples. `eval` runs after each epoch and may
/// return a test accuracy to record.
pub(crate) fn train_loop(
    params: &mut ModelParams,
    n: usize,
    spec: &LoopSpec<'_>,
    loss: &LossFn<'_>,
    eval: &mut dyn FnMut(&ModelParams) -> Result<Option<f64>>,
) -> Result<StageLog> {
    if n == 0 && spec.epochs > 0 {
        return Err(Error::contract("training set is empty"));
    }
    spec.opt.validate()?;
    let mut opt = AdamW::new(spec.opt, params);
    let mut log = StageLog::new(spec.name);
    for epoch in 1..=spec.epochs {
        let lr = (spec.lr)(epoch)?;
        let order = epoch_order(spec.shuffle_seed, epoch, n);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(spec.opt.batch_size).enumerate() {
            let diverged = |reason: String| Error::Training { epoch, step, reason };
            // every example already passed once, so later failures come from the weights
            let (value, grads) = match batch_grad(params, &spec.trainable, loss, batch) {
                Err(e @ (Error::Contract(_) | Error::Numeric(_))) if opt.steps_taken() > 0 => {
                    return Err(diverged(e.to_string()))
                }
                other => other?,
            };
            let finite = value.is_finite() && grads.iter().flatten().flatten().all(|g| g.is_finite());
            if !finite {
                return Err(diverged(format!("non-finite loss or gradient (loss {value})")));
            }
            epoch_loss += value * batch.len() as f64;
            opt.step(params, &grads, lr);
            if !params.is_finite() {
                return Err(diverged("non-finite parameters after update".into()));
            }
        }
        log.train_loss.push(epoch_loss / n as f64);
        if let Some(acc) = eval(params)? {
            log.test_accuracy.push(acc);
        }
    }
    Ok(log)
}
