//! Training objectives as scalar nodes on a [`Tape`].
//!
//! Teacher-side quantities are always passed as plain slices, so no gradient
//! can reach a teacher tensor through any loss here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

const SIMPLEX_TOL: f64 = 1e-9;

/// Weights shared by the soft-label loss (`alpha` KL, `beta` CE) and the
/// single-stage loss (`alpha` CE, `beta` KL, `gamma` MSE).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Softens both answer distributions inside the KL term only.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.0,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    /// CE 0.25, KL 0.25, MSE 0.5.
    pub fn single_stage() -> Self {
        LossWeights {
            alpha: 0.25,
            beta: 0.25,
            gamma: 0.5,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.temperature];
        if all.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

pub fn one_hot(label: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    y[label] = 1.0;
    y
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::contract(format!(
            "{name} is not a probability distribution: {p:?}"
        )));
    }
    Ok(())
}

/// `-sum_i y_i log p_i` for a one-hot `y`.
pub fn cross_entropy(tape: &mut Tape, y: &[f64], p: Var) -> Result<Var> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("target is not one-hot: {y:?}")));
    }
    check_distribution("p", tape.value(p).data())?;
    tape.cross_entropy(y, p)
}

/// Mean of `(T_e - S_e)^2` over every element of every aligned vector.
/// `student` is the `[k x d]` matrix of student vectors in teacher order.
pub fn mse_alignment(tape: &mut Tape, teacher: &[Vec<f64>], student: Var) -> Result<Var> {
    let shape = tape.shape(student).to_vec();
    let d = teacher.first().map_or(0, Vec::len);
    if shape != [teacher.len(), d] || teacher.iter().any(|t| t.len() != d) {
        return Err(Error::contract(format!(
            "alignment mismatch: {} teacher vectors of width {d} vs student {shape:?}",
            teacher.len()
        )));
    }
    tape.mean_squared_error(&teacher.concat(), student)
}

/// `sum_i T_i (log T_i - log S_i)`; gradient flows to `S` only.
pub fn kl_divergence(tape: &mut Tape, t: &[f64], s: Var) -> Result<Var> {
    check_distribution("T", t)?;
    check_distribution("S", tape.value(s).data())?;
    tape.kl_divergence(t, s)
}

/// `alpha * KL(T || S) + beta * CE(y, p)`.
pub fn soft_label_loss(
    tape: &mut Tape,
    t_probs: &[f64],
    s_probs: Var,
    y: &[f64],
    p: Var,
    w: &LossWeights,
) -> Result<Var> {
    let kl = kl_divergence(tape, t_probs, s_probs)?;
    let ce = cross_entropy(tape, y, p)?;
    weighted_sum(tape, &[(kl, w.alpha), (ce, w.beta)])
}

/// `alpha * CE + beta * KL + gamma * MSE`.
pub fn single_stage_loss(tape: &mut Tape, ce: Var, kl: Var, mse: Var, w: &LossWeights) -> Result<Var> {
    weighted_sum(tape, &[(ce, w.alpha), (kl, w.beta), (mse, w.gamma)])
}

pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        if tape.value(v).numel() != 1 {
            return Err(Error::contract("weighted_sum: terms must be scalars"));
        }
        let scaled = tape.scale(v, w);
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| Error::contract("weighted_sum: no terms"))
}

/// Average of per-sample scalar losses.
pub fn batch_mean(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::contract("batch_mean: empty batch"));
    }
    let w = 1.0 / losses.len() as f64;
    let terms: Vec<(Var, f64)> = losses.iter().map(|&l| (l, w)).collect();
    weighted_sum(tape, &terms)
}
