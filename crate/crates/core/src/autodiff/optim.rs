//! Named parameter storage, Adam, and the cosine learning-rate schedule.

use super::{Gradients, Tape, Tensor, VarId};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Named trainable tensors. BTreeMap keeps iteration (and therefore update
/// and checkpoint) order deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Registers every parameter as a tape leaf, in name order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect();
        BoundParams { ids }
    }
}

/// Name → tape variable mapping for one forward pass.
pub struct BoundParams {
    ids: BTreeMap<String, VarId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Extracts one gradient tensor per parameter (zeros where unused).
    pub fn collect_grads(&self, store: &ParamStore, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let shape = store.get(name).shape().to_vec();
                (name.clone(), grads.get_or_zeros(id, &shape))
            })
            .collect()
    }
}

/// Adam moment accumulators; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// Standard bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let names: Vec<String> = params.entries.keys().cloned().collect();
    for name in names {
        let g = match grads.get(&name) {
            Some(g) => g,
            None => continue,
        };
        let p = params.entries.get_mut(&name).expect("param exists");
        debug_assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Cosine decay from `lr0` to `floor` over `total_steps`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub total_steps: usize,
    pub floor: f64,
}

impl CosineSchedule {
    pub fn new(lr0: f64, total_steps: usize) -> Self {
        CosineSchedule {
            lr0,
            total_steps,
            floor: 0.0,
        }
    }
}

/// `lr = floor + (lr0 − floor) · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, schedule: &CosineSchedule) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::InvalidConfig(format!(
            "cosine_lr step {step} out of range 0..={}",
            schedule.total_steps
        )));
    }
    let frac = step as f64 / schedule.total_steps.max(1) as f64;
    Ok(schedule.floor
        + (schedule.lr0 - schedule.floor) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}
