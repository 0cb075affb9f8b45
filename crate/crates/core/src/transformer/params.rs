use indexmap::IndexMap;

use crate::adapter::FreezePolicy;
use crate::error::{invalid, DvpError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Named parameter collection in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter {name}")));
        }
        self.map.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.map.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        let (k, v) = self.map.get_index(i).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> (&str, &mut Tensor) {
        let (k, v) = self.map.get_index_mut(i).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Drops every tensor whose name fails `keep`, preserving order.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.map.retain(|k, _| keep(k));
    }

    /// Sum of tensor sizes.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }
}

/// Which bound parameters get gradients.
#[derive(Clone, Copy, Debug)]
pub enum GradMode {
    None,
    All,
    Policy(FreezePolicy),
}

impl GradMode {
    fn tracks(&self, name: &str) -> bool {
        match self {
            GradMode::None => false,
            GradMode::All => true,
            GradMode::Policy(p) => p.is_trainable(name),
        }
    }
}

/// Gradients keyed by parameter index in the store they were bound from.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.entries.iter().find(|(i, _)| *i == index).map(|(_, g)| g.as_slice())
    }

    /// Adds `other` scaled by `weight` into `self`.
    pub fn accumulate(&mut self, other: &ParamGrads, weight: f64) {
        for (idx, g) in &other.entries {
            match self.entries.iter_mut().find(|(i, _)| i == idx) {
                Some((_, mine)) => mine.iter_mut().zip(g).for_each(|(a, b)| *a += weight * b),
                None => self.entries.push((*idx, g.iter().map(|v| weight * v).collect())),
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A tape plus lazily bound parameters from one store.
pub struct Graph<'m> {
    pub tape: Tape,
    store: &'m ParamStore,
    bound: Vec<Option<Var>>,
    mode: GradMode,
    attn_log: Vec<AttnRecord>,
}

/// One attention node recorded during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnRecord {
    pub site: String,
    pub var: Var,
}

impl<'m> Graph<'m> {
    pub fn new(store: &'m ParamStore, mode: GradMode) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            attn_log: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| DvpError::InvalidArgument(format!("missing parameter {name}")))?;
        if let Some(v) = self.bound[idx] {
            return Ok(v);
        }
        let t = self.store.by_index(idx).1.clone();
        let v = if self.mode.tracks(name) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[idx] = Some(v);
        Ok(v)
    }

    pub fn record_attention(&mut self, site: String, var: Var) {
        self.attn_log.push(AttnRecord { site, var });
    }

    pub fn attention_log(&self) -> &[AttnRecord] {
        &self.attn_log
    }

    /// Backward from `loss`, returning gradients of every tracked parameter.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(loss)?;
        let entries = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .filter(|(_, v)| self.tape.requires_grad(*v))
            .filter_map(|(i, v)| grads.take(v).map(|g| (i, g)))
            .collect();
        Ok(ParamGrads { entries })
    }
}
