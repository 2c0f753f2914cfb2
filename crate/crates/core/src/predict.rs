//! Class-wise aggregation, the scoring MLP, and the episode loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Activation, Bound, ParamSet};
use crate::tape::{self, Var};
use crate::Mode;

pub fn init_params<R: Rng + ?Sized>(params: &mut ParamSet, d: usize, rng: &mut R) -> Result<()> {
    params.add_linear("pred.fc1", 2 * d, d, rng)?;
    params.add_linear("pred.fc2", d, 1, rng)
}

/// `[max_k m_k; mean_k m_k]` over the K instance-wise vectors of one class.
pub fn class_aggregate<'t>(matches: &[Var<'t>]) -> Result<Var<'t>> {
    if matches.is_empty() {
        return Err(Error::Data("class aggregation needs at least one matching vector".into()));
    }
    tape::concat_rows(matches)?.pool_max_avg()
}

#[derive(Clone, Copy, Debug)]
pub struct EpisodeLogits<'t> {
    pub logits: Var<'t>,
    pub log_probs: Var<'t>,
}

impl EpisodeLogits<'_> {
    pub fn probabilities(&self) -> Vec<f64> {
        self.log_probs.value().data().iter().map(|v| v.exp()).collect()
    }
}

/// Scores each class vector with one shared two-layer MLP and normalises
/// over classes.
pub fn predict<'t>(class_vectors: &[Var<'t>], params: &Bound<'t>, mode: &mut Mode<'_>) -> Result<EpisodeLogits<'t>> {
    if class_vectors.len() < 2 {
        return Err(Error::Config(format!(
            "prediction needs at least two classes, got {}",
            class_vectors.len()
        )));
    }
    let stacked = tape::concat_rows(class_vectors)?;
    let hidden = params
        .linear("pred.fc1")?
        .forward(mode.dropout(stacked)?, Activation::Relu)?;
    let scores = params
        .linear("pred.fc2")?
        .forward(mode.dropout(hidden)?, Activation::Identity)?;
    let logits = scores.transpose()?;
    Ok(EpisodeLogits {
        logits,
        log_probs: logits.log_softmax_rows()?,
    })
}

/// Mean negative log-probability of the true class over the queries.
/// `log_probs[r]` is a `1×N` row of log-probabilities.
pub fn episode_loss<'t>(log_probs: &[Var<'t>], labels: &[usize]) -> Result<Var<'t>> {
    if log_probs.is_empty() || log_probs.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            log_probs.len(),
            labels.len()
        )));
    }
    let mut picked = Vec::with_capacity(labels.len());
    for (lp, &y) in log_probs.iter().zip(labels) {
        let n = lp.cols();
        if y >= n {
            return Err(Error::Data(format!("label {y} outside {n} classes")));
        }
        picked.push(lp.pick(&[y])?);
    }
    let r = labels.len() as f64;
    Ok(tape::concat_cols(&picked)?.sum().scale(-1.0 / r))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
