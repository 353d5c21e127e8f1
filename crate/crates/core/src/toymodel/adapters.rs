use serde::{Deserialize, Serialize};

use super::model::{EffectiveWeights, ToyAttentionModel};
use crate::error::{RcuError, Result};
use crate::lora::{compose, materialize_composite, FrozenComposite, LoraPair, SkewMode};
use crate::matrix::{ensure_same_shape, Matrix};

/// How the adapters of successive requests combine with the base weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    /// `(I + b_T M_T) ... (I + b_1 M_1) W`
    #[default]
    Stacked,
    /// `(I + sum_t b_t M_t) W`
    FromBase,
}

impl std::str::FromStr for Composition {
    type Err = RcuError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stacked" => Ok(Composition::Stacked),
            "from-base" => Ok(Composition::FromBase),
            _ => Err(RcuError::Config(format!("unknown composition mode {s:?}"))),
        }
    }
}

/// Multiplicative rotation update or the plain additive LoRA baseline `W + b M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateKind {
    #[default]
    Multiplicative,
    Additive,
}

/// Adapters trained for one request, one pair per adapted weight in
/// [`ToyAttentionModel::layer_ids`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestAdapters {
    pub request_index: usize,
    pub pairs: Vec<LoraPair>,
    pub mode: SkewMode,
}

impl RequestAdapters {
    pub fn composites(&self) -> Result<Vec<Matrix>> {
        self.pairs.iter().map(|p| Ok(self.mode.composite(compose(p)?))).collect()
    }

    pub fn freeze(&self) -> Result<Vec<FrozenComposite>> {
        self.pairs.iter().map(|p| FrozenComposite::from_pair(p, self.mode, self.request_index)).collect()
    }

    pub fn check_aligned(&self, model: &ToyAttentionModel) -> Result<()> {
        let ids = model.layer_ids();
        if ids.len() != self.pairs.len() {
            return Err(RcuError::Config(format!(
                "request {} has {} adapters for {} adapted weights",
                self.request_index,
                self.pairs.len(),
                ids.len()
            )));
        }
        for (id, p) in ids.iter().zip(&self.pairs) {
            if *id != p.layer_id {
                return Err(RcuError::Config(format!("adapter for {} found where {id} expected", p.layer_id)));
            }
            if p.dim() != model.dim() {
                return Err(RcuError::Config(format!("adapter {id} has dim {} for model dim {}", p.dim(), model.dim())));
            }
        }
        Ok(())
    }
}

/// Frozen adapters of every completed request, with precomputed composites.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterStack {
    pub composition: Composition,
    pub update: UpdateKind,
    requests: Vec<RequestAdapters>,
    composites: Vec<Vec<Matrix>>,
}

impl AdapterStack {
    pub fn new(composition: Composition, update: UpdateKind) -> Self {
        AdapterStack { composition, update, requests: Vec::new(), composites: Vec::new() }
    }

    pub fn push(&mut self, model: &ToyAttentionModel, adapters: RequestAdapters) -> Result<()> {
        adapters.check_aligned(model)?;
        self.composites.push(adapters.composites()?);
        self.requests.push(adapters);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn requests(&self) -> &[RequestAdapters] {
        &self.requests
    }

    pub fn composites(&self, request: usize) -> &[Matrix] {
        &self.composites[request]
    }

    /// Effective projection weights with one salience weight per stored request.
    pub fn effective_weights(&self, model: &ToyAttentionModel, betas: &[f64]) -> Result<EffectiveWeights> {
        if betas.len() != self.requests.len() {
            return Err(RcuError::Config(format!("{} betas for {} requests", betas.len(), self.requests.len())));
        }
        let mut ws = model.base_weights();
        for (li, id) in model.layer_ids().into_iter().enumerate() {
            let w = &mut ws[id.block][id.proj.index()];
            *w = compose_layer(self.composition, self.update, w, self.composites.iter().map(|c| &c[li]), betas)?;
        }
        Ok(ws)
    }
}

/// Applies composites `ms` with weights `betas` to one base weight. Zero
/// weights are skipped, so all-zero betas return `w` bit for bit.
pub(crate) fn compose_layer<'a>(
    composition: Composition,
    update: UpdateKind,
    w: &Matrix,
    ms: impl Iterator<Item = &'a Matrix>,
    betas: &[f64],
) -> Result<Matrix> {
    let mut out = w.clone();
    let mut sum: Option<Matrix> = None;
    for (m, &beta) in ms.zip(betas) {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(RcuError::domain("compose", format!("beta must be finite and >= 0, got {beta}")));
        }
        if beta == 0.0 {
            continue;
        }
        ensure_same_shape(m, w, "compose")?;
        match (update, composition) {
            (UpdateKind::Additive, _) => out += m * beta,
            (UpdateKind::Multiplicative, Composition::Stacked) => out = materialize_composite(&out, m, beta)?,
            (UpdateKind::Multiplicative, Composition::FromBase) => match &mut sum {
                Some(s) => *s += m * beta,
                None => sum = Some(m * beta),
            },
        }
    }
    if let Some(s) = sum {
        out = materialize_composite(w, &s, 1.0)?;
    }
    Ok(out)
}

/// Weights obtained by applying a single request's pairs at one `beta`.
pub fn adapted_weights(
    model: &ToyAttentionModel,
    pairs: &[LoraPair],
    mode: SkewMode,
    update: UpdateKind,
    beta: f64,
) -> Result<EffectiveWeights> {
    if pairs.is_empty() {
        return Ok(model.base_weights());
    }
    let adapters = RequestAdapters { request_index: 1, pairs: pairs.to_vec(), mode };
    let mut stack = AdapterStack::new(Composition::Stacked, update);
    stack.push(model, adapters)?;
    stack.effective_weights(model, &[beta])
}
