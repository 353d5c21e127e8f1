use super::adapters::{adapted_weights, AdapterStack, UpdateKind};
use super::model::{log_softmax_rows, EffectiveWeights, ToyAttentionModel};
use crate::data::Dataset;
use crate::error::{RcuError, Result};
use crate::lora::{LoraPair, SkewMode};
use crate::matrix::Matrix;
use crate::par::{self, Exec};

fn argmax(row: &Matrix) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

/// Class log-probabilities (N x C) for a batch of sequences under fixed weights.
pub fn forward_weights(model: &ToyAttentionModel, ws: &EffectiveWeights, inputs: &[Vec<usize>], exec: Exec) -> Result<Matrix> {
    let rows = par::try_map_range(exec, inputs.len(), |i| model.logits(ws, &inputs[i]))?;
    let mut out = Matrix::zeros(inputs.len(), model.num_classes());
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from(&log_softmax_rows(r).row(0));
    }
    Ok(out)
}

/// Log-probabilities with every adapted weight replaced by `(I + beta M) W`
/// (or `W + beta M` for the additive update). Empty `pairs` means the base model.
pub fn forward(
    model: &ToyAttentionModel,
    pairs: &[LoraPair],
    mode: SkewMode,
    update: UpdateKind,
    beta: f64,
    inputs: &[Vec<usize>],
) -> Result<Matrix> {
    let ws = adapted_weights(model, pairs, mode, update, beta)?;
    forward_weights(model, &ws, inputs, Exec::Parallel)
}

pub fn predict(model: &ToyAttentionModel, ws: &EffectiveWeights, tokens: &[usize]) -> Result<usize> {
    Ok(argmax(&model.logits(ws, tokens)?))
}

fn ensure_nonempty(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(RcuError::domain("evaluate", format!("dataset {:?} is empty", ds.name)));
    }
    Ok(())
}

/// Fraction of samples whose argmax prediction equals the original label.
pub fn evaluate_weights(model: &ToyAttentionModel, ws: &EffectiveWeights, ds: &Dataset, exec: Exec) -> Result<f64> {
    ensure_nonempty(ds)?;
    let hits = par::try_map_range(exec, ds.len(), |i| {
        let s = &ds.samples[i];
        Ok::<_, RcuError>(predict(model, ws, &s.tokens)? == s.label)
    })?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / ds.len() as f64)
}

pub fn evaluate(
    model: &ToyAttentionModel,
    pairs: &[LoraPair],
    mode: SkewMode,
    update: UpdateKind,
    beta: f64,
    ds: &Dataset,
    exec: Exec,
) -> Result<f64> {
    let ws = adapted_weights(model, pairs, mode, update, beta)?;
    evaluate_weights(model, &ws, ds, exec)
}

/// Accuracy with one salience weight per stored request per sample.
pub fn evaluate_per_input(
    model: &ToyAttentionModel,
    stack: &AdapterStack,
    betas: &[Vec<f64>],
    ds: &Dataset,
    exec: Exec,
) -> Result<f64> {
    ensure_nonempty(ds)?;
    if betas.len() != ds.len() {
        return Err(RcuError::shape("evaluate_per_input", format!("{} beta rows for {} samples", betas.len(), ds.len())));
    }
    let hits = par::try_map_range(exec, ds.len(), |i| {
        let ws = stack.effective_weights(model, &betas[i])?;
        let s = &ds.samples[i];
        Ok::<_, RcuError>(predict(model, &ws, &s.tokens)? == s.label)
    })?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / ds.len() as f64)
}
