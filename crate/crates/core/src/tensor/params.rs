use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn fresh(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Named trainable tensors plus per-parameter optimizer state.
///
/// Iteration order is registration order, so seeded initialization and
/// updates are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    order: Vec<String>,
    params: HashMap<String, Tensor>,
    state: HashMap<String, AdamState>,
    optimizer: Optimizer,
}

impl ParamStore {
    pub fn new(optimizer: Optimizer) -> Self {
        Self {
            optimizer,
            ..Self::default()
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        self.optimizer
    }

    pub fn set_optimizer(&mut self, optimizer: Optimizer) {
        self.optimizer = optimizer;
        for (name, t) in &self.params {
            self.state.insert(name.clone(), AdamState::fresh(t.len()));
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Contract(format!("parameter `{name}` registered twice")));
        }
        let n = tensor.len();
        self.state.insert(name.clone(), AdamState::fresh(n));
        self.params.insert(name.clone(), tensor.with_requires_grad());
        self.order.push(name);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))?;
        if g.len() != p.len() {
            return Err(TensorError::Contract(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Sets every gradient to zeros.
    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Some(vec![0.0; p.len()]);
        }
    }

    /// Multiplies every present gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// One optimizer update; gradients are zeroed afterwards.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        if let Some(name) = self.order.iter().find(|n| self.params[*n].grad.is_none()) {
            return Err(TensorError::Contract(format!("parameter `{name}` has no gradient")));
        }
        for name in &self.order {
            let p = self.params.get_mut(name).expect("registered");
            let grad = p.grad.take().expect("checked above");
            match self.optimizer {
                Optimizer::Sgd => {
                    for (w, g) in p.data_mut().iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let st = self.state.get_mut(name).expect("state mirrors params");
                    st.step += 1;
                    let bc1 = 1.0 - beta1.powi(st.step as i32);
                    let bc2 = 1.0 - beta2.powi(st.step as i32);
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grad[i];
                        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                        let mhat = st.m[i] / bc1;
                        let vhat = st.v[i] / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            p.grad = Some(vec![0.0; grad.len()]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk form: a config header plus `{name -> {shape, data}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<H> {
    pub config: H,
    pub params: BTreeMap<String, TensorRecord>,
}

pub fn save_checkpoint<H: Serialize>(path: &Path, config: &H, store: &ParamStore) -> Result<()> {
    let params = store
        .order
        .iter()
        .map(|n| {
            let t = &store.params[n];
            (
                n.clone(),
                TensorRecord {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect();
    let ck = Checkpoint { config, params };
    fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

/// Loads a checkpoint header and overwrites the values of `store`. Every
/// registered parameter must be present with a matching shape.
pub fn load_checkpoint<H: DeserializeOwned>(path: &Path, store: &mut ParamStore) -> Result<H> {
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint<H> = serde_json::from_str(&text)?;
    for name in store.order.clone() {
        let rec = ck
            .params
            .get(&name)
            .ok_or_else(|| TensorError::Contract(format!("checkpoint lacks parameter `{name}`")))?;
        let p = store.params.get_mut(&name).expect("registered");
        if rec.shape != p.shape() {
            return Err(TensorError::Contract(format!(
                "checkpoint shape {:?} for `{name}` differs from model shape {:?}",
                rec.shape,
                p.shape()
            )));
        }
        p.data_mut().copy_from_slice(&rec.data);
    }
    Ok(ck.config)
}

/// Header-only read, used to rebuild a model before loading its values.
pub fn read_checkpoint_header<H: DeserializeOwned>(path: &Path) -> Result<H> {
    #[derive(Deserialize)]
    struct HeaderOnly<H> {
        config: H,
    }
    let text = fs::read_to_string(path)?;
    let h: HeaderOnly<H> = serde_json::from_str(&text)?;
    Ok(h.config)
}
